"""Surgical Progress Index: per-second procedure progress in [0, 1].

For a complete recording the index at second t is simply t / T for video
length T. Recordings that begin late or end early (missing leading or
trailing phases) cover only part of the procedure, so their time axis is
mapped into the covered span. The span comes from a transition table: the
average fraction of a complete procedure at which each phase ends,
estimated from complete recordings of the same procedure type.

Two adjustment modes are provided:

* ``scaled`` (default): progress runs from the average start fraction of
  the first recorded phase to 1 minus the average fraction of everything
  missing, linearly in t. Stays inside [0, 1] by construction.
* ``literal``: t / T plus the average-fraction mass of the missing phases.
  Simpler, but overshoots 1.0 near the end of a recording with a missing
  prefix; kept selectable for comparison against the scaled form.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class TransitionTable:
    """Average end-of-phase fractions for one procedure type.

    boundaries[i] is the mean, over complete recordings, of the fraction of
    the recording elapsed when phase i ends; the last entry is exactly 1.
    """

    names: tuple
    boundaries: tuple

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        bounds = tuple(float(b) for b in self.boundaries)
        if len(names) != len(bounds) or not names:
            raise ValidationError("transition table needs one boundary per phase")
        if any(not 0.0 < b <= 1.0 for b in bounds):
            raise ValidationError("phase boundaries must lie in (0, 1]")
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ValidationError("phase boundaries must be strictly increasing")
        if abs(bounds[-1] - 1.0) > 1e-9:
            raise ValidationError("last phase boundary must be 1.0")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "boundaries", bounds)

    @property
    def num_phases(self):
        return len(self.names)

    @property
    def fractions(self):
        """Average fraction of the procedure occupied by each phase."""
        return np.diff(np.concatenate(([0.0], np.asarray(self.boundaries))))

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("phase,boundary\n")
            for name, b in zip(self.names, self.boundaries):
                fh.write(f"{name},{b!r}\n")

    @classmethod
    def from_csv(cls, path):
        with open(path, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
        if not lines or lines[0] != "phase,boundary":
            raise ValidationError(f"{path}: expected header 'phase,boundary'")
        names, bounds = [], []
        for i, ln in enumerate(lines[1:], start=2):
            parts = ln.split(",")
            if len(parts) != 2:
                raise ValidationError(f"{path}: row {i}: expected 'phase,boundary'")
            names.append(parts[0])
            try:
                bounds.append(float(parts[1]))
            except ValueError:
                raise ValidationError(f"{path}: row {i}: bad boundary {parts[1]!r}") from None
        return cls(tuple(names), tuple(bounds))


def spi_complete(t, total):
    """Progress at second t of a complete recording of length total.

    Defined on the closed interval [0, total]: the recording starts at
    progress 0 and ends at exactly 1.
    """
    if total < 1:
        raise ValidationError(f"video length must be >= 1, got {total}")
    if not 0 <= t <= total:
        raise ValidationError(f"second {t} out of range for length {total}")
    return t / total


def transition_table(tracks, taxonomy) -> TransitionTable:
    """Estimate phase-end fractions from the complete recordings in tracks.

    A recording is complete when every phase of the taxonomy appears.
    Incomplete recordings are ignored; at least one complete one is required.
    """
    p = taxonomy.num_phases
    ends = []
    for track in tracks:
        if len(track.phases_present) != p:
            continue
        total = track.num_frames
        # labels are non-decreasing, so the end of phase i is the count of
        # labels <= i
        ends.append(np.searchsorted(track.labels, np.arange(p), side="right") / total)
    if not ends:
        raise ValidationError("no complete recording available to estimate the transition table")
    means = np.mean(np.stack(ends), axis=0)
    return TransitionTable(taxonomy.names, tuple(float(b) for b in means))


def spi_adjusted(t, total, present, table: TransitionTable, mode="scaled"):
    """Progress at second t of a recording containing only `present` phases.

    present: indices of the phases that appear, in taxonomy order.
    """
    if total < 1:
        raise ValidationError(f"video length must be >= 1, got {total}")
    if not 0 <= t <= total:
        raise ValidationError(f"second {t} out of range for length {total}")
    present = sorted(set(int(i) for i in present))
    if not present:
        raise ValidationError("a recording must contain at least one phase")
    if present[0] < 0 or present[-1] >= table.num_phases:
        raise ValidationError(f"phase index out of range for {table.num_phases} phases")
    fr = table.fractions
    missing = [i for i in range(table.num_phases) if i not in set(present)]
    if not missing:
        return spi_complete(t, total)
    if mode == "literal":
        return t / total + float(fr[missing].sum())
    if mode != "scaled":
        raise ValidationError(f"unknown adjustment mode {mode!r}")
    offset = float(fr[[i for i in missing if i < present[0]]].sum())
    span = 1.0 - float(fr[missing].sum())
    return offset + (t / total) * span


def build_spi_targets(track, table: TransitionTable = None, mode="scaled"):
    """Per-second progress targets for one annotation track, float32 (T,).

    Complete recordings need no table; incomplete ones require one.
    """
    total = track.num_frames
    present = track.phases_present
    ts = np.arange(total, dtype=np.float64)
    if table is None or len(present) == table.num_phases:
        if table is None and len(present) < track.num_phases:
            raise ValidationError(
                f"video {track.video_id!r} is missing phases; a transition table is required"
            )
        out = ts / total
    else:
        fr = table.fractions
        missing = [i for i in range(table.num_phases) if i not in set(present)]
        if mode == "literal":
            out = ts / total + float(fr[missing].sum())
        elif mode == "scaled":
            offset = float(fr[[i for i in missing if i < min(present)]].sum())
            span = 1.0 - float(fr[missing].sum())
            out = offset + (ts / total) * span
        else:
            raise ValidationError(f"unknown adjustment mode {mode!r}")
    return out.astype(np.float32)


def spi_output_error(predicted, target):
    """Mean absolute difference between predicted and target progress."""
    p = np.asarray(predicted, dtype=np.float64)
    g = np.asarray(target, dtype=np.float64)
    if p.shape != g.shape or p.size == 0:
        raise ValidationError(f"progress arrays must match and be non-empty: {p.shape} vs {g.shape}")
    return float(np.mean(np.abs(p - g)))
