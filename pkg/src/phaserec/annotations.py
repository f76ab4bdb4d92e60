"""Frame-level phase annotations, dataset assembly, and synthetic corpora.

An annotation track labels every second of one video with a phase index.
Within a video, phases appear as contiguous blocks in taxonomy order
(non-decreasing labels); leading or trailing phases may be absent when the
recording starts late or ends early, but a phase never recurs.

The synthetic generator builds corpora with the same shape as real data:
per-phase mean durations with jitter, optional missing prefix/suffix
phases, per-class feature offsets, one slowly drifting channel tied to
progress, and pure-noise channels. An optional "ambiguous pair" gives two
phases identical class offsets so that only temporal context (the drift
channel, and position within the video) can separate them.
"""

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from .errors import AnnotationError, ValidationError
from .features import FeatureSequence, read_features, write_features
from .model import PhaseTaxonomy

ANNOTATION_HEADER = ("video_id", "t", "phase_name")
MIN_PHASE_SECONDS = 5


@dataclass
class AnnotationTrack:
    """Per-second phase labels for one video, as taxonomy indices."""

    video_id: str
    labels: np.ndarray
    num_phases: int

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 1 or lab.shape[0] < 1:
            raise ValidationError(f"labels must be a non-empty 1-d array, got shape {lab.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            raise ValidationError("labels must be integers")
        lab = lab.astype(np.int64)
        if lab.min() < 0 or lab.max() >= self.num_phases:
            raise ValidationError(
                f"video {self.video_id!r}: label outside [0, {self.num_phases})"
            )
        if np.any(np.diff(lab) < 0):
            t = int(np.argmax(np.diff(lab) < 0)) + 1
            raise ValidationError(
                f"video {self.video_id!r}: phase order regresses at second {t}; "
                "phases must form contiguous blocks in taxonomy order"
            )
        self.labels = lab

    @property
    def num_frames(self):
        return self.labels.shape[0]

    @property
    def phases_present(self):
        return tuple(int(i) for i in np.unique(self.labels))

    def phase_seconds(self):
        """Seconds spent in each phase, length num_phases (0 when absent)."""
        return np.bincount(self.labels, minlength=self.num_phases)


# ---------------------------------------------------------------------------
# annotation CSV


def parse_annotations(text, taxonomy: PhaseTaxonomy):
    """Parse annotation CSV into tracks, one per video, in file order.

    Rows are ``video_id,t,phase_name`` after an exact header; seconds must
    be dense 0..T-1 per video and rows for a video must be consecutive.
    Errors carry the offending row number.
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise AnnotationError("empty annotation file") from None
    if tuple(header) != ANNOTATION_HEADER:
        raise AnnotationError(
            f"expected header {','.join(ANNOTATION_HEADER)!r}, got {','.join(header)!r}", row=1
        )
    order = []
    labels = {}
    for row_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise AnnotationError(f"expected 3 fields, got {len(row)}", row=row_no)
        vid, t_str, name = row
        try:
            t = int(t_str)
        except ValueError:
            raise AnnotationError(f"bad second {t_str!r}", row=row_no) from None
        phase = taxonomy.index(name) if name in taxonomy.names else None
        if phase is None:
            raise AnnotationError(f"unknown phase name {name!r}", row=row_no)
        if vid not in labels:
            order.append(vid)
            labels[vid] = []
        elif vid != order[-1]:
            raise AnnotationError(f"rows for video {vid!r} are not consecutive", row=row_no)
        if t != len(labels[vid]):
            raise AnnotationError(
                f"video {vid!r}: expected second {len(labels[vid])}, got {t}", row=row_no
            )
        labels[vid].append(phase)
    if not order:
        raise AnnotationError("annotation file contains no rows")
    tracks = []
    for vid in order:
        try:
            tracks.append(
                AnnotationTrack(vid, np.asarray(labels[vid]), taxonomy.num_phases)
            )
        except ValidationError as e:
            raise AnnotationError(str(e)) from None
    return tracks


def read_annotations(path, taxonomy: PhaseTaxonomy):
    with open(path, encoding="utf-8") as fh:
        try:
            return parse_annotations(fh.read(), taxonomy)
        except AnnotationError as e:
            raise AnnotationError(f"{path}: {e}") from None


def serialize_annotations(tracks, taxonomy: PhaseTaxonomy):
    out = [",".join(ANNOTATION_HEADER)]
    for track in tracks:
        for t, lab in enumerate(track.labels):
            out.append(f"{track.video_id},{t},{taxonomy.names[int(lab)]}")
    return "\n".join(out) + "\n"


def write_annotations(path, tracks, taxonomy):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_annotations(tracks, taxonomy))


# ---------------------------------------------------------------------------
# dataset statistics


@dataclass
class PhaseStat:
    name: str
    videos: int
    total_seconds: int
    mean_seconds: float


@dataclass
class DatasetStats:
    num_videos: int
    complete_videos: int
    total_seconds: int
    mean_video_seconds: float
    phases: list

    def render(self):
        lines = [
            f"videos: {self.num_videos} ({self.complete_videos} complete)",
            f"total seconds: {self.total_seconds}  mean video length: {self.mean_video_seconds:.1f}s",
            f"{'phase':<24}{'videos':>8}{'seconds':>10}{'mean':>10}",
        ]
        for p in self.phases:
            lines.append(
                f"{p.name:<24}{p.videos:>8}{p.total_seconds:>10}{p.mean_seconds:>10.1f}"
            )
        return "\n".join(lines)


def dataset_stats(tracks, taxonomy: PhaseTaxonomy) -> DatasetStats:
    if not tracks:
        raise ValidationError("no annotation tracks given")
    per_phase = np.zeros((len(tracks), taxonomy.num_phases), dtype=np.int64)
    for i, tr in enumerate(tracks):
        if tr.num_phases != taxonomy.num_phases:
            raise ValidationError(f"video {tr.video_id!r} uses a different taxonomy size")
        per_phase[i] = tr.phase_seconds()
    videos = (per_phase > 0).sum(axis=0)
    totals = per_phase.sum(axis=0)
    phases = [
        PhaseStat(
            name=taxonomy.names[i],
            videos=int(videos[i]),
            total_seconds=int(totals[i]),
            mean_seconds=float(totals[i] / videos[i]) if videos[i] else 0.0,
        )
        for i in range(taxonomy.num_phases)
    ]
    total = int(per_phase.sum())
    return DatasetStats(
        num_videos=len(tracks),
        complete_videos=int(np.sum((per_phase > 0).all(axis=1))),
        total_seconds=total,
        mean_video_seconds=total / len(tracks),
        phases=phases,
    )


# ---------------------------------------------------------------------------
# splits


@dataclass
class Split:
    train_ids: tuple
    eval_ids: tuple


@dataclass
class SplitPlan:
    """Either a fixed head/tail split or seeded k-fold cross-validation."""

    mode: str = "fixed"
    n_train: int = None
    k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("fixed", "cv"):
            raise ValidationError(f"split mode must be 'fixed' or 'cv', got {self.mode!r}")


def make_splits(video_ids, plan: SplitPlan):
    ids = list(video_ids)
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate video ids")
    if plan.mode == "fixed":
        n = plan.n_train
        if n is None or not 0 < n < len(ids):
            raise ValidationError(f"fixed split needs 0 < n_train < {len(ids)}, got {n}")
        return [Split(tuple(ids[:n]), tuple(ids[n:]))]
    if not 2 <= plan.k <= len(ids):
        raise ValidationError(f"cv split needs 2 <= k <= {len(ids)}, got {plan.k}")
    rng = np.random.default_rng(plan.seed)
    folds = np.array_split(rng.permutation(len(ids)), plan.k)
    splits = []
    for i in range(plan.k):
        eval_idx = sorted(int(j) for j in folds[i])
        eval_set = set(eval_idx)
        train = tuple(ids[j] for j in range(len(ids)) if j not in eval_set)
        splits.append(Split(train, tuple(ids[j] for j in eval_idx)))
    return splits


# ---------------------------------------------------------------------------
# synthetic corpora


@dataclass
class SynthSpec:
    """Recipe for a synthetic corpus with realistic annotation structure."""

    taxonomy: PhaseTaxonomy
    mean_durations: tuple  # seconds per phase
    missing_prob: tuple = None  # per phase, applied as prefix/suffix chains
    n_videos: int = 20
    feature_dim: int = 16
    separation: float = 4.0  # class-offset magnitude
    noise: float = 1.0  # per-frame feature noise
    duration_jitter: float = 0.15  # sd of phase duration, relative to mean
    drift_strength: float = 1.0  # rise of the progress channel over a video
    drift_noise: float = 0.5  # noise on the progress channel
    ambiguous_pair: tuple = None  # two phases sharing one class offset

    def __post_init__(self):
        p = self.taxonomy.num_phases
        self.mean_durations = tuple(float(x) for x in self.mean_durations)
        if len(self.mean_durations) != p or any(x < MIN_PHASE_SECONDS for x in self.mean_durations):
            raise ValidationError(
                f"need {p} mean durations, each >= {MIN_PHASE_SECONDS} seconds"
            )
        if self.missing_prob is None:
            self.missing_prob = (0.0,) * p
        self.missing_prob = tuple(float(x) for x in self.missing_prob)
        if len(self.missing_prob) != p or any(not 0.0 <= x <= 1.0 for x in self.missing_prob):
            raise ValidationError(f"need {p} missing-phase probabilities in [0, 1]")
        if all(x >= 1.0 for x in self.missing_prob):
            raise ValidationError("missing-phase probabilities leave no phase in any video")
        if self.n_videos < 1:
            raise ValidationError("n_videos must be >= 1")
        if self.feature_dim < p + 2:
            raise ValidationError(
                f"feature_dim must be >= num_phases + 2 = {p + 2} "
                "(class offsets, drift channel, at least one noise channel)"
            )
        if self.ambiguous_pair is not None:
            a, b = (int(i) for i in self.ambiguous_pair)
            if not (0 <= a < p and 0 <= b < p and a != b):
                raise ValidationError(f"ambiguous_pair must be two distinct phases, got {a},{b}")
            self.ambiguous_pair = (a, b)


def _draw_present(spec: SynthSpec, rng):
    p = spec.taxonomy.num_phases
    for _ in range(100):
        present = list(range(p))
        for i in range(p):  # late recording start drops a leading chain
            if rng.uniform() < spec.missing_prob[i]:
                present.remove(i)
            else:
                break
        for i in range(p - 1, -1, -1):  # early recording end drops a trailing chain
            if i not in present:
                break
            if rng.uniform() < spec.missing_prob[i]:
                present.remove(i)
            else:
                break
        if present:
            return present
    raise ValidationError("missing-phase probabilities leave no phase in any video")


def synth_generate(spec: SynthSpec, seed=0):
    """Generate (feature sequences, annotation tracks) for one corpus.

    Deterministic in (spec, seed). Feature layout: channels [0, P) carry the
    per-class offsets, channel P the drift, the rest pure noise. An
    ambiguous pair shares one offset and is separable only through temporal
    context.

    The drift channel models slowly evolving physical state: it rises with
    *procedure* progress, so a recording that starts late (missing prefix
    phases) starts with the drift already advanced by the average fraction
    of what it skipped. For complete recordings this is simply 0 -> 1 over
    the video.
    """
    rng = np.random.default_rng(seed)
    p = spec.taxonomy.num_phases
    d = spec.feature_dim
    offsets = np.zeros((p, p), dtype=np.float64)
    for i in range(p):
        offsets[i, i] = spec.separation
    if spec.ambiguous_pair is not None:
        a, b = spec.ambiguous_pair
        offsets[b] = offsets[a]
    frac = np.asarray(spec.mean_durations) / np.sum(spec.mean_durations)
    sequences, tracks = [], []
    for v in range(spec.n_videos):
        present = _draw_present(spec, rng)
        durations = [
            max(
                MIN_PHASE_SECONDS,
                int(round(rng.normal(spec.mean_durations[i], spec.duration_jitter * spec.mean_durations[i]))),
            )
            for i in present
        ]
        labels = np.repeat(np.asarray(present, dtype=np.int64), durations)
        total = labels.shape[0]
        start = float(frac[: present[0]].sum())
        stop = float(frac[: present[-1] + 1].sum())
        progress = start + (stop - start) * np.arange(total) / max(total - 1, 1)
        feat = rng.standard_normal((total, d))
        feat[:, :p] = spec.noise * feat[:, :p] + offsets[labels]
        feat[:, p] = spec.drift_noise * feat[:, p] + spec.drift_strength * progress
        feat[:, p + 1 :] *= spec.noise
        vid = f"synth{v:03d}"
        sequences.append(FeatureSequence(vid, feat.astype(np.float32)))
        tracks.append(AnnotationTrack(vid, labels, p))
    return sequences, tracks


# ---------------------------------------------------------------------------
# corpus directories


def write_corpus(root, sequences, tracks, taxonomy: PhaseTaxonomy):
    """Write features/, annotations.csv, taxonomy.txt, manifest.csv under root."""
    if len(sequences) != len(tracks):
        raise ValidationError("sequences and tracks differ in length")
    feat_dir = os.path.join(root, "features")
    os.makedirs(feat_dir, exist_ok=True)
    for seq, track in zip(sequences, tracks):
        if seq.video_id != track.video_id or seq.num_frames != track.num_frames:
            raise ValidationError(f"features/annotations mismatch for video {seq.video_id!r}")
        write_features(os.path.join(feat_dir, f"{seq.video_id}.prfv"), seq)
    write_annotations(os.path.join(root, "annotations.csv"), tracks, taxonomy)
    taxonomy.to_file(os.path.join(root, "taxonomy.txt"))
    with open(os.path.join(root, "manifest.csv"), "w", encoding="utf-8") as fh:
        fh.write("video_id,frames,feature_dim,phases_present\n")
        for seq, track in zip(sequences, tracks):
            fh.write(
                f"{seq.video_id},{seq.num_frames},{seq.dim},{len(track.phases_present)}\n"
            )


def load_corpus(root):
    """Load a corpus directory back into (sequences, tracks, taxonomy).

    Order follows annotations.csv. Every annotated video must have a feature
    file with a matching frame count.
    """
    taxonomy = PhaseTaxonomy.from_file(os.path.join(root, "taxonomy.txt"))
    tracks = read_annotations(os.path.join(root, "annotations.csv"), taxonomy)
    sequences = []
    for track in tracks:
        path = os.path.join(root, "features", f"{track.video_id}.prfv")
        if not os.path.exists(path):
            raise ValidationError(f"missing feature file for video {track.video_id!r}: {path}")
        seq = read_features(path, video_id=track.video_id)
        if seq.num_frames != track.num_frames:
            raise ValidationError(
                f"video {track.video_id!r}: {seq.num_frames} feature frames vs "
                f"{track.num_frames} annotated seconds"
            )
        sequences.append(seq)
    return sequences, tracks, taxonomy
