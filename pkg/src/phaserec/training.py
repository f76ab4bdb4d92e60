"""Training loop: composite objective, step-decayed Adam, per-epoch logging.

The objective blends phase classification and progress regression:

    loss = lambda * CE(phase probs, label) + (1 - lambda) * MAE(progress)

with lambda in [0, 1]; disabling the progress head reduces it to plain
cross-entropy. The optimizer is Adam under a step-decay schedule: the
learning rate starts at lr0 and is multiplied by `decay` every
`decay_every` epochs.

A training example is one (video, second): the raw-frame span ending at
that second, its phase label, and its progress target. Epochs shuffle the
example inventory with a run-seeded generator, so a fixed seed fixes the
entire batch order and, with it, the trained parameters bit for bit.
"""

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import evaluate as ev
from . import kernels
from . import model as M
from . import spi as spi_mod
from .errors import NumericError, ValidationError


@dataclass
class LossConfig:
    lam: float = 0.5  # weight on classification; 1 - lam on progress
    spi_enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"lambda must be in [0, 1], got {self.lam}")


@dataclass
class OptimConfig:
    lr0: float = 5e-6
    decay: float = 0.1
    decay_every: int = 10
    epochs: int = 30
    batch: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr0 <= 0 or not 0 < self.decay <= 1 or self.decay_every < 1:
            raise ValidationError("need lr0 > 0, 0 < decay <= 1, decay_every >= 1")
        if self.epochs < 1 or self.batch < 1:
            raise ValidationError("need epochs >= 1 and batch >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValidationError("invalid Adam constants")


def lr_at(epoch, cfg: OptimConfig):
    """Learning rate for a zero-based epoch under the step-decay schedule."""
    if not 0 <= epoch < cfg.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr0 * cfg.decay ** (epoch // cfg.decay_every)


def composite_loss(probs, labels, spi_pred, spi_target, cfg: LossConfig):
    """Blended objective over one batch; returns (loss tensor, parts dict).

    probs: (B, P) phase probabilities; labels: (B,) int; spi_pred: (B,)
    tensor or None; spi_target: (B,) array. Probabilities are clamped at
    1e-12 before the log. parts holds float values of both terms.
    """
    picked = ad.gather_index(probs, labels)
    ce = ad.neg(ad.tmean(ad.log_clamped(picked)))
    parts = {"ce": float(ce.data)}
    if cfg.spi_enabled:
        if spi_pred is None:
            raise ValidationError("progress loss enabled but the model has no progress head")
        mae = ad.tmean(ad.absolute(ad.sub(spi_pred, ad.Tensor(np.asarray(spi_target)))))
        parts["mae"] = float(mae.data)
        loss = ad.add(ad.mul(ce, cfg.lam), ad.mul(mae, 1.0 - cfg.lam))
    else:
        parts["mae"] = None
        loss = ce
    return loss, parts


class AdamState:
    """First/second moment buffers per parameter, plus the step counter."""

    def __init__(self, params):
        self.step = 0
        self.m = {k: np.zeros(p.data.size, dtype=np.float32) for k, p in params.items()}
        self.v = {k: np.zeros(p.data.size, dtype=np.float32) for k, p in params.items()}


def adam_step(params, state: AdamState, lr, cfg: OptimConfig):
    """Apply one Adam update in place from each parameter's .grad.

    Parameters with no gradient this step (absent from the graph) are left
    untouched. A non-finite gradient aborts with the parameter name, the
    step number, and the bad-entry count, so a diverging run fails loudly
    instead of poisoning the parameters.
    """
    state.step += 1
    corr1 = 1.0 - cfg.beta1 ** state.step
    corr2 = 1.0 - cfg.beta2 ** state.step
    for name in params:  # params dict is sorted at construction
        p = params[name]
        if p.grad is None:
            continue
        g = np.ascontiguousarray(p.grad, dtype=np.float32).reshape(-1)
        if not np.isfinite(np.sum(g, dtype=np.float64)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NumericError(
                f"non-finite gradient for parameter {name!r} at optimizer step "
                f"{state.step} ({bad} bad entries)"
            )
        kernels.adam_update(
            p.data.reshape(-1), g, state.m[name], state.v[name],
            float(lr), cfg.beta1, cfg.beta2, cfg.eps, corr1, corr2,
        )
        p.grad = None


# ---------------------------------------------------------------------------
# corpus samples and the fit loop


@dataclass
class VideoSample:
    """One video ready for training: features, labels, progress targets."""

    features: object
    track: object
    spi: np.ndarray

    def __post_init__(self):
        if self.features.video_id != self.track.video_id:
            raise ValidationError("features/track video ids differ")
        if self.features.num_frames != self.track.num_frames:
            raise ValidationError(
                f"video {self.features.video_id!r}: feature/annotation length mismatch"
            )
        if self.spi is not None and self.spi.shape != (self.features.num_frames,):
            raise ValidationError(f"video {self.features.video_id!r}: bad progress target shape")


def make_samples(sequences, tracks, table=None, mode="scaled"):
    """Pair features with annotations and build per-second progress targets."""
    by_id = {s.video_id: s for s in sequences}
    out = []
    for track in tracks:
        if track.video_id not in by_id:
            raise ValidationError(f"no features for annotated video {track.video_id!r}")
        spi = spi_mod.build_spi_targets(track, table, mode=mode)
        out.append(VideoSample(by_id[track.video_id], track, spi))
    return out


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    eval_acc: float
    eval_jaccard: float
    spi_err: float


@dataclass
class FitResult:
    model: object
    history: list
    best_epoch: int
    best_accuracy: float
    seconds: float


LOG_HEADER = ("epoch", "lr", "train_loss", "eval_acc", "eval_jaccard", "spi_err")


def fit(
    model,
    train,
    evals,
    loss_cfg: LossConfig,
    optim_cfg: OptimConfig,
    seed=0,
    log_path=None,
    checkpoint_path=None,
) -> FitResult:
    """Train on per-second examples; evaluate after each epoch.

    train/evals: lists of VideoSample. The best checkpoint (highest eval
    accuracy, earliest epoch on ties) is kept when checkpoint_path is given;
    the returned model carries the final-epoch parameters. The per-epoch log
    is written as CSV when log_path is given and always returned.
    """
    if not train or not evals:
        raise ValidationError("training and evaluation splits must both be non-empty")
    if loss_cfg.spi_enabled and not model.config.spi_head:
        raise ValidationError("progress loss enabled but the model has no progress head")
    span = model.config.train_span
    for s in train:
        if s.features.dim != model.config.d_in:
            raise ValidationError(
                f"video {s.features.video_id!r} feature dim {s.features.dim} != model d_in"
            )

    # one flat example inventory over (video, second); features concatenated
    # so a batch of spans is a single fancy index into one matrix
    frames = np.array([s.features.num_frames for s in train], dtype=np.int64)
    starts = np.concatenate(([0], np.cumsum(frames)))
    all_feats = np.concatenate([s.features.matrix for s in train], axis=0)
    vid_of = np.repeat(np.arange(len(train), dtype=np.int64), frames)
    t_of = np.concatenate([np.arange(n, dtype=np.int64) for n in frames])
    n_examples = vid_of.shape[0]
    labels_of = np.concatenate([s.track.labels for s in train])
    spi_of = (
        np.concatenate([s.spi for s in train]) if loss_cfg.spi_enabled else None
    )
    rel = np.arange(-span + 1, 1, dtype=np.int64)

    rng = np.random.default_rng(seed)
    state = AdamState(model.params)
    history = []
    best_epoch, best_acc = -1, -np.inf
    t_start = time.perf_counter()
    log_fh = open(log_path, "w", encoding="utf-8", newline="") if log_path else None
    try:
        writer = None
        if log_fh:
            writer = csv.writer(log_fh)
            writer.writerow(LOG_HEADER)
        for epoch in range(optim_cfg.epochs):
            lr = lr_at(epoch, optim_cfg)
            order = rng.permutation(n_examples)
            loss_sum = 0.0
            for start in range(0, n_examples, optim_cfg.batch):
                sel = order[start : start + optim_cfg.batch]
                idx = np.maximum(t_of[sel][:, None] + rel[None, :], 0) + starts[vid_of[sel]][:, None]
                x = all_feats[idx.reshape(-1)].reshape(sel.size, span, model.config.d_in)
                with ad.Graph() as graph:
                    probs, spi_pred = M.full_forward(model, x)
                    loss, _ = composite_loss(
                        probs,
                        labels_of[sel],
                        spi_pred,
                        spi_of[sel] if spi_of is not None else None,
                        loss_cfg,
                    )
                ad.backward(graph, loss)
                adam_step(model.params, state, lr, optim_cfg)
                loss_sum += float(loss.data) * sel.size
            report = ev.evaluate_model(model, evals)
            log = EpochLog(
                epoch=epoch,
                lr=lr,
                train_loss=loss_sum / n_examples,
                eval_acc=report.accuracy,
                eval_jaccard=report.macro_jaccard,
                spi_err=report.spi_mae,
            )
            history.append(log)
            if writer:
                writer.writerow(
                    [
                        log.epoch,
                        repr(log.lr),
                        repr(log.train_loss),
                        repr(log.eval_acc),
                        repr(log.eval_jaccard),
                        "" if log.spi_err is None else repr(log.spi_err),
                    ]
                )
                log_fh.flush()
            if report.accuracy > best_acc:
                best_epoch, best_acc = epoch, report.accuracy
                if checkpoint_path:
                    M.save_checkpoint(checkpoint_path, model)
    finally:
        if log_fh:
            log_fh.close()
    return FitResult(
        model=model,
        history=history,
        best_epoch=best_epoch,
        best_accuracy=float(best_acc),
        seconds=time.perf_counter() - t_start,
    )
