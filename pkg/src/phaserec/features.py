"""Per-frame feature handling and the temporal feature pipeline.

A video arrives as a per-second feature matrix (one row per second, feature
extraction itself is upstream). The pipeline here:

  1. project each frame vector to the working width,
  2. refine each frame with 2-head attention over a causal context window
     ending at that frame (skippable, which degenerates to frame-based
     features),
  3. cut fixed-length windows ending at the prediction second,
  4. encode a window into a single vector with a transformer stack, read
     at the final position.

Context and window cuts share one padding rule: positions before the video
start are filled by replicating frame 0. Positional encodings inside the
refiner are relative to the context window (right-aligned), so a constant
video refines to a constant sequence and predictions are stationary.
"""

import struct
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import ShapeError, ValidationError

FEATURE_MAGIC = b"PRFV"
FEATURE_VERSION = 1


@dataclass
class FeatureSequence:
    """Feature matrix for one recording: row t is the frame at second t."""

    video_id: str
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise ValidationError(f"feature matrix must be (T, D) with T,D >= 1, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValidationError(f"non-finite feature values in video {self.video_id!r}")
        self.matrix = np.ascontiguousarray(m, dtype=np.float32)

    @property
    def num_frames(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]


def write_features(path, seq: FeatureSequence):
    t, d = seq.matrix.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, t, d))
        fh.write(seq.matrix.astype("<f4", copy=False).tobytes())


def read_features(path, video_id=None) -> FeatureSequence:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != FEATURE_MAGIC:
            raise ValidationError(f"{path}: not a feature file (bad magic)")
        version, t, d = struct.unpack("<III", head[4:])
        if version != FEATURE_VERSION:
            raise ValidationError(f"{path}: unsupported feature file version {version}")
        payload = fh.read(4 * t * d)
        if len(payload) != 4 * t * d:
            raise ValidationError(f"{path}: truncated feature file")
        extra = fh.read(1)
        if extra:
            raise ValidationError(f"{path}: trailing bytes after feature payload")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(t, d)
    if video_id is None:
        video_id = _stem(path)
    return FeatureSequence(video_id=video_id, matrix=matrix.copy())


def _stem(path):
    name = str(path).replace("\\", "/").rsplit("/", 1)[-1]
    return name[: -len(".prfv")] if name.endswith(".prfv") else name


# ---------------------------------------------------------------------------
# windowing


def window_indices(t, n, num_frames=None):
    """Frame indices [t-n+1, t], left-padded by repeating frame 0."""
    if n < 1:
        raise ValidationError(f"window length must be >= 1, got {n}")
    if num_frames is not None and not 0 <= t < num_frames:
        raise ValidationError(f"frame {t} out of range for video with {num_frames} frames")
    return np.maximum(np.arange(t - n + 1, t + 1), 0)


def window(seq_matrix, t, n):
    """The n-frame block ending at second t (rows of seq_matrix)."""
    m = np.asarray(seq_matrix)
    return m[window_indices(t, n, num_frames=m.shape[0])]


def positional_encoding(n, d_model):
    """Sinusoidal table: PE[pos, 2j] = sin(pos / 10000^(2j/d)), odd entries cos."""
    if n < 1 or d_model < 1:
        raise ValidationError("positional encoding needs n >= 1 and d_model >= 1")
    pos = np.arange(n, dtype=np.float64)[:, None]
    j = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, j / d_model)
    pe = np.zeros((n, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : pe[:, 1::2].shape[1]])
    return pe.astype(np.float32)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class RefinerConfig:
    heads: int = 2
    d_model: int = 128
    context: int = 80

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValidationError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.context < 1:
            raise ValidationError("refiner context must be >= 1")


@dataclass
class AttnParams:
    """Per-projection weights; the key projection carries no bias because a
    shared shift of every key moves all scores in a softmax row equally and
    therefore cannot affect the attention output."""

    wq: ad.Tensor
    bq: ad.Tensor
    wk: ad.Tensor
    wv: ad.Tensor
    bv: ad.Tensor
    wo: ad.Tensor
    bo: ad.Tensor


@dataclass
class RefinerParams:
    wp: ad.Tensor
    bp: ad.Tensor
    attn: AttnParams


@dataclass
class TceLayerParams:
    ln1_g: ad.Tensor
    ln1_b: ad.Tensor
    attn: AttnParams
    ln2_g: ad.Tensor
    ln2_b: ad.Tensor
    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor


def named_tensors(obj, prefix):
    """Flat (name, tensor) pairs for a params dataclass, recursing on nesting."""
    out = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, ad.Tensor):
            out.append((f"{prefix}.{f.name}", v))
        else:
            out.extend(named_tensors(v, f"{prefix}.{f.name}"))
    return out


def _linear(x, w, b):
    """x @ w + b on the last axis, any leading shape.

    Leading axes are flattened around the matmul so the weight gradient is
    a single GEMM rather than a batched GEMM plus a reduction.
    """
    if x.data.ndim == 2:
        return ad.add(ad.matmul(x, w), b)
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, x.shape[-1]))
    return ad.reshape(ad.add(ad.matmul(flat, w), b), lead + (w.shape[1],))


def _split_heads(x, heads):
    # (B, n, d) -> (B, heads, n, d/heads)
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    # (B, heads, n, dh) -> (B, n, heads*dh)
    b, h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def self_attention(x, p: AttnParams, heads):
    """Full bidirectional multi-head self-attention over (B, n, d)."""
    d = x.shape[-1]
    dh = d // heads
    q = _split_heads(_linear(x, p.wq, p.bq), heads)
    k = _split_heads(_proj_flat(x, p.wk), heads)
    v = _split_heads(_linear(x, p.wv, p.bv), heads)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    ctx = _merge_heads(ad.matmul(attn, v))
    return _linear(ctx, p.wo, p.bo)


def refine(x, params: RefinerParams, cfg: RefinerConfig, enabled=True):
    """Refine per-frame features with causal windowed attention.

    x: (B, L, D_in) raw frames. Returns (B, L, d_model); position t attends
    to positions [t-context+1, t] of its own sequence (clamped to 0, which
    replicates the first frame, matching the window padding rule). With
    enabled=False only the projection is applied: the frame-based ablation.

    Keys/values are conceptually the projection of (context frame + relative
    positional encoding). Both enter the K/V maps linearly, so the frame term
    is projected once per frame and the encoding term once per context slot,
    then summed after the gather; this is exact, not an approximation, and
    avoids re-projecting every frame for each window it appears in.
    """
    if x.shape[-1] != params.wp.shape[0]:
        raise ShapeError(f"refiner expects input dim {params.wp.shape[0]}, got {x.shape[-1]}")
    proj = _linear(x, params.wp, params.bp)
    if not enabled:
        return proj
    b, length, d = proj.shape
    heads = cfg.heads
    dh = d // heads
    n_ctx = cfg.context
    pe_np = positional_encoding(n_ctx, d).astype(proj.dtype, copy=False)
    pe = ad.Tensor(pe_np)
    a = params.attn

    kf = _proj_flat(proj, a.wk)  # per-frame key term
    vf = _proj_flat(proj, a.wv)
    kp = ad.matmul(pe, a.wk)  # per-slot key term
    vp = ad.add(ad.matmul(pe, a.wv), a.bv)  # per-slot value term (bias folded in)
    q_in = ad.add(proj, ad.Tensor(pe_np[-1]))  # query sits at the last slot
    q = ad.reshape(_linear(q_in, a.wq, a.bq), (b, length, heads, 1, dh))

    idx = np.maximum(np.arange(length)[:, None] + np.arange(-n_ctx + 1, 1)[None, :], 0)
    k = _ctx_heads(ad.add(ad.take(kf, idx, axis=1), kp), heads)
    v = _ctx_heads(ad.add(ad.take(vf, idx, axis=1), vp), heads)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 2, 4, 3))), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)  # (B, L, heads, 1, n_ctx)
    ctx = ad.reshape(ad.matmul(attn, v), (b, length, d))
    return ad.add(proj, _linear(ctx, a.wo, a.bo))


def _proj_flat(x, w):
    """Bias-free linear on the last axis via one flattened GEMM."""
    lead = x.shape[:-1]
    return ad.reshape(ad.matmul(ad.reshape(x, (-1, x.shape[-1])), w), lead + (w.shape[1],))


def _ctx_heads(x, heads):
    # (B, L, n_ctx, d) -> (B, L, heads, n_ctx, dh)
    b, length, n_ctx, d = x.shape
    return ad.transpose(ad.reshape(x, (b, length, n_ctx, heads, d // heads)), (0, 1, 3, 2, 4))


def encode(block, layers, heads):
    """Summarize a window into one vector: transformer stack, final position.

    block: (B, n, d) refined frames; returns (B, d). Attention inside the
    window is unmasked: every frame in the window is already in the past of
    the prediction second (the window ends at it), so bidirectional mixing
    does not break online causality.
    """
    b, n, d = block.shape
    pe = positional_encoding(n, d).astype(block.dtype, copy=False)
    x = ad.add(block, ad.Tensor(pe))
    for lp in layers:
        a = ad.layer_norm(x, lp.ln1_g, lp.ln1_b)
        x = ad.add(x, self_attention(a, lp.attn, heads))
        f = ad.layer_norm(x, lp.ln2_g, lp.ln2_b)
        h = _linear(ad.relu(_linear(f, lp.w1, lp.b1)), lp.w2, lp.b2)
        x = ad.add(x, h)
    return ad.reshape(ad.take(x, np.array(n - 1), axis=1), (b, d))
