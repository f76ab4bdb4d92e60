"""Recognition metrics, evaluation reports, and the timeline ribbon export.

Frame-level metrics compare predicted and annotated phase per second.
Macro aggregates average over the phases that actually occur in the ground
truth (phases with zero truth support are reported but excluded from
macros); a phase that is never predicted gets precision 0 rather than an
undefined value. The default report pools frames across videos; the
per-video mode computes each aggregate per video and reports mean and
sample standard deviation (ddof=1) across videos.
"""

from dataclasses import dataclass

import numpy as np

from . import model as M
from .errors import ValidationError
from .spi import spi_output_error

AGGREGATE_FIELDS = (
    "accuracy",
    "macro_precision",
    "macro_recall",
    "macro_f1",
    "macro_jaccard",
    "spi_mae",
)


def confusion(truth, pred, num_phases):
    """Counts[i, j] = seconds annotated as phase i and predicted as phase j."""
    t = np.asarray(truth, dtype=np.int64)
    p = np.asarray(pred, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1 or t.size == 0:
        raise ValidationError(f"label arrays must be equal non-empty 1-d, got {t.shape} vs {p.shape}")
    if t.min() < 0 or t.max() >= num_phases or p.min() < 0 or p.max() >= num_phases:
        raise ValidationError(f"labels outside [0, {num_phases})")
    return np.bincount(t * num_phases + p, minlength=num_phases * num_phases).reshape(
        num_phases, num_phases
    )


@dataclass
class ClassMetrics:
    name: str
    support: int
    predicted: int
    precision: float
    recall: float
    f1: float
    jaccard: float


@dataclass
class EvalReport:
    mode: str  # "pooled" or "per-video"
    frames: int
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_jaccard: float
    spi_mae: float
    per_class: list
    stds: dict


def class_metrics(conf, names):
    out = []
    for i, name in enumerate(names):
        tp = float(conf[i, i])
        support = int(conf[i].sum())
        predicted = int(conf[:, i].sum())
        fp = predicted - tp
        fn = support - tp
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        jac = tp / (tp + fp + fn) if (tp + fp + fn) else 0.0
        out.append(ClassMetrics(name, support, predicted, precision, recall, f1, jac))
    return out


def _aggregates(conf, names, spi_pred, spi_target):
    per_class = class_metrics(conf, names)
    occurring = [c for c in per_class if c.support > 0]
    if not occurring:
        raise ValidationError("no ground-truth phase occurs")
    agg = {
        "accuracy": float(np.trace(conf) / conf.sum()),
        "macro_precision": float(np.mean([c.precision for c in occurring])),
        "macro_recall": float(np.mean([c.recall for c in occurring])),
        "macro_f1": float(np.mean([c.f1 for c in occurring])),
        "macro_jaccard": float(np.mean([c.jaccard for c in occurring])),
        "spi_mae": spi_output_error(spi_pred, spi_target) if spi_pred is not None else None,
    }
    return agg, per_class


def pooled_report(truths, preds, names, spi_preds=None, spi_targets=None) -> EvalReport:
    """One report over the concatenated frames of all videos."""
    truth = np.concatenate([np.asarray(t) for t in truths])
    pred = np.concatenate([np.asarray(p) for p in preds])
    conf = confusion(truth, pred, len(names))
    sp = np.concatenate(spi_preds) if spi_preds is not None else None
    st = np.concatenate(spi_targets) if spi_targets is not None else None
    agg, per_class = _aggregates(conf, names, sp, st)
    return EvalReport(
        mode="pooled", frames=int(truth.size), per_class=per_class, stds={}, **agg
    )


def per_video_report(truths, preds, names, spi_preds=None, spi_targets=None) -> EvalReport:
    """Aggregates computed per video, then mean and sample std across videos."""
    if not truths:
        raise ValidationError("no videos to evaluate")
    rows = []
    total_conf = np.zeros((len(names), len(names)), dtype=np.int64)
    for i in range(len(truths)):
        conf = confusion(truths[i], preds[i], len(names))
        total_conf += conf
        sp = spi_preds[i] if spi_preds is not None else None
        st = spi_targets[i] if spi_targets is not None else None
        agg, _ = _aggregates(conf, names, sp, st)
        rows.append(agg)
    means, stds = {}, {}
    for key in AGGREGATE_FIELDS:
        vals = [r[key] for r in rows]
        if any(v is None for v in vals):
            means[key] = None
            continue
        means[key] = float(np.mean(vals))
        stds[key] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    per_class = class_metrics(total_conf, names)
    frames = int(sum(np.asarray(t).size for t in truths))
    return EvalReport(mode="per-video", frames=frames, per_class=per_class, stds=stds, **means)


def evaluate_model(model, samples, mode="pooled", chunk=512, names=None) -> EvalReport:
    """Predict every sample video and score it against its annotations.

    samples: objects with .features, .track, and .spi (per-second targets or
    None). Progress error is reported only when the model has a progress head
    and targets are present.
    """
    if mode not in ("pooled", "per-video"):
        raise ValidationError(f"mode must be 'pooled' or 'per-video', got {mode!r}")
    truths, preds, spi_p, spi_t = [], [], [], []
    with_spi = model.config.spi_head and all(s.spi is not None for s in samples)
    for s in samples:
        out = M.predict_video(model, s.features, chunk=chunk)
        truths.append(s.track.labels)
        preds.append(np.asarray([o.phase for o in out], dtype=np.int64))
        if with_spi:
            spi_p.append(np.asarray([o.spi for o in out], dtype=np.float64))
            spi_t.append(np.asarray(s.spi, dtype=np.float64))
    if names is None:
        names = tuple(f"phase{i}" for i in range(model.config.num_phases))
    fn = pooled_report if mode == "pooled" else per_video_report
    return fn(
        truths,
        preds,
        names,
        spi_preds=spi_p if with_spi else None,
        spi_targets=spi_t if with_spi else None,
    )


# ---------------------------------------------------------------------------
# report serialization


def report_to_csv(report: EvalReport) -> str:
    lines = ["metric,value", f"mode,{report.mode}", f"frames,{report.frames}"]
    for key in AGGREGATE_FIELDS:
        val = getattr(report, key)
        if val is not None:
            lines.append(f"{key},{val!r}")
    for key in AGGREGATE_FIELDS:
        if key in report.stds:
            lines.append(f"{key}_std,{report.stds[key]!r}")
    lines.append("class,name,support,predicted,precision,recall,f1,jaccard")
    for c in report.per_class:
        lines.append(
            f"class,{c.name},{c.support},{c.predicted},{c.precision!r},{c.recall!r},{c.f1!r},{c.jaccard!r}"
        )
    return "\n".join(lines) + "\n"


def report_from_csv(text) -> EvalReport:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "metric,value":
        raise ValidationError("expected report header 'metric,value'")
    scalars, stds, per_class = {}, {}, []
    for ln in lines[1:]:
        parts = ln.split(",")
        if parts[0] == "class":
            if parts[1] == "name":
                continue
            per_class.append(
                ClassMetrics(
                    name=parts[1],
                    support=int(parts[2]),
                    predicted=int(parts[3]),
                    precision=float(parts[4]),
                    recall=float(parts[5]),
                    f1=float(parts[6]),
                    jaccard=float(parts[7]),
                )
            )
        elif parts[0].endswith("_std"):
            stds[parts[0][: -len("_std")]] = float(parts[1])
        else:
            scalars[parts[0]] = parts[1]
    kwargs = {k: None for k in AGGREGATE_FIELDS}
    for k, v in scalars.items():
        if k == "mode":
            kwargs["mode"] = v
        elif k == "frames":
            kwargs["frames"] = int(v)
        elif k in AGGREGATE_FIELDS:
            kwargs[k] = float(v)
        else:
            raise ValidationError(f"unknown report row {k!r}")
    return EvalReport(per_class=per_class, stds=stds, **kwargs)


def write_report(path, report: EvalReport):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report_to_csv(report))


def read_report(path) -> EvalReport:
    with open(path, encoding="utf-8") as fh:
        return report_from_csv(fh.read())


def render_report(report: EvalReport) -> str:
    lines = [
        f"{report.mode} evaluation over {report.frames} frames",
        f"  accuracy       {report.accuracy:.4f}" + _pm(report, "accuracy"),
        f"  macro precision {report.macro_precision:.4f}" + _pm(report, "macro_precision"),
        f"  macro recall   {report.macro_recall:.4f}" + _pm(report, "macro_recall"),
        f"  macro F1       {report.macro_f1:.4f}" + _pm(report, "macro_f1"),
        f"  macro Jaccard  {report.macro_jaccard:.4f}" + _pm(report, "macro_jaccard"),
    ]
    if report.spi_mae is not None:
        lines.append(f"  progress MAE   {report.spi_mae:.4f}" + _pm(report, "spi_mae"))
    lines.append(f"  {'phase':<20}{'support':>9}{'prec':>8}{'recall':>8}{'f1':>8}{'jaccard':>9}")
    for c in report.per_class:
        lines.append(
            f"  {c.name:<20}{c.support:>9}{c.precision:>8.3f}{c.recall:>8.3f}{c.f1:>8.3f}{c.jaccard:>9.3f}"
        )
    return "\n".join(lines)


def _pm(report, key):
    if key in report.stds:
        return f" +/- {report.stds[key]:.4f}"
    return ""


# ---------------------------------------------------------------------------
# ribbon export

_PALETTE = (
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#b07aa1",
    "#76b7b2", "#edc948", "#9c755f", "#bab0ac", "#d37295",
)


def ribbon_export(truth, pred, names, svg_path, csv_path, spi_pred=None, spi_target=None, video_id=""):
    """Write a truth/prediction timeline ribbon (SVG) and its data (CSV).

    The SVG contains exactly two rects per frame: one in the truth ribbon,
    one in the prediction ribbon. Progress curves are polylines below the
    ribbons when given.
    """
    t = np.asarray(truth, dtype=np.int64)
    p = np.asarray(pred, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1 or t.size == 0:
        raise ValidationError("truth/prediction must be equal-length non-empty 1-d arrays")
    total = t.size
    colors = [_PALETTE[i % len(_PALETTE)] for i in range(len(names))]
    px = 2.0
    left = 90.0
    width = left + total * px + 10
    with_spi = spi_pred is not None and spi_target is not None
    height = 210.0 if with_spi else 120.0

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.0f} {height:.0f}" font-family="sans-serif" font-size="11">',
        f'<text x="{left:.0f}" y="14">{video_id or "timeline"} ({total} s)</text>',
        '<text x="4" y="40">truth</text>',
        '<text x="4" y="75">predicted</text>',
    ]
    for labels, y in ((t, 25.0), (p, 60.0)):
        for i in range(total):
            parts.append(
                f'<rect x="{left + i * px:.2f}" y="{y:.2f}" width="{px:.2f}" height="25.00" '
                f'fill="{colors[int(labels[i])]}"/>'
            )
    for i, name in enumerate(names):
        parts.append(
            f'<text x="{left + i * 110:.2f}" y="103" fill="{colors[i]}">{name}</text>'
        )
    if with_spi:
        sp = np.asarray(spi_pred, dtype=np.float64)
        st = np.asarray(spi_target, dtype=np.float64)
        if sp.shape != (total,) or st.shape != (total,):
            raise ValidationError("progress arrays must match the timeline length")
        y0, h = 115.0, 80.0

        def poly(vals):
            return " ".join(
                f"{left + i * px:.2f},{y0 + h * (1.0 - min(max(v, 0.0), 1.0)):.2f}"
                for i, v in enumerate(vals)
            )

        parts.append(
            f'<polyline points="{poly(st)}" fill="none" stroke="#888888" stroke-dasharray="4 3"/>'
        )
        parts.append(f'<polyline points="{poly(sp)}" fill="none" stroke="#4e79a7"/>')
        parts.append(f'<text x="4" y="{y0 + h / 2:.0f}">progress</text>')
    parts.append("</svg>")
    with open(svg_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")

    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("t,truth,pred,spi_pred,spi_target\n")
        for i in range(total):
            a = f"{float(spi_pred[i])!r}" if with_spi else ""
            b = f"{float(spi_target[i])!r}" if with_spi else ""
            fh.write(f"{i},{names[int(t[i])]},{names[int(p[i])]},{a},{b}\n")
