"""Phase recognition model: windowed encoder branches plus output heads.

Composition, end to end for one prediction second t:

  raw frames -> refine (causal context attention) -> per-branch windows
  ending at t -> transformer encode, final position -> concat branch
  vectors -> linear fuse -> phase head (softmax over phases) and progress
  head (sigmoid, predicted progress in [0, 1]).

Each branch has its own window length and encoder stack, so one model can
mix a long-horizon and a short-horizon view of the same refined sequence.
The progress head is optional (spi_head=False drops it); the refiner can be
disabled, which reduces the features to per-frame projections.
"""

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import features as ft
from .errors import ShapeError, ValidationError

positional_encoding = ft.positional_encoding

CHECKPOINT_MAGIC = b"PRCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PhaseTaxonomy:
    """Ordered phase names; order is temporal order within a procedure."""

    names: tuple

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        if len(names) < 2:
            raise ValidationError("a taxonomy needs at least 2 phases")
        if len(set(names)) != len(names):
            raise ValidationError("duplicate phase names in taxonomy")
        if any((not n) or ("," in n) or ("\n" in n) for n in names):
            raise ValidationError("phase names must be non-empty, without commas or newlines")
        object.__setattr__(self, "names", names)

    @property
    def num_phases(self):
        return len(self.names)

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown phase name {name!r}") from None

    def to_file(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.names) + "\n")

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            names = [ln.strip() for ln in fh if ln.strip()]
        return cls(tuple(names))


@dataclass
class ModelConfig:
    num_phases: int
    d_in: int = 2048
    d_model: int = 128
    heads: int = 2
    layers: int = 2
    ffn_mult: int = 2
    branch_lengths: tuple = (80,)
    refiner_heads: int = 2
    refiner_context: int = 80
    refiner_enabled: bool = True
    spi_head: bool = True

    def __post_init__(self):
        self.branch_lengths = tuple(int(n) for n in self.branch_lengths)
        if self.num_phases < 2:
            raise ValidationError("num_phases must be >= 2")
        for name in ("d_in", "d_model", "heads", "layers", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if not self.branch_lengths or any(n < 1 for n in self.branch_lengths):
            raise ValidationError("branch_lengths must be non-empty positive window lengths")
        if len(set(self.branch_lengths)) != len(self.branch_lengths):
            raise ValidationError("branch_lengths must be distinct")
        if self.d_model % self.heads != 0:
            raise ValidationError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        # construction also validates refiner head divisibility and context
        self.refiner = ft.RefinerConfig(
            heads=self.refiner_heads, d_model=self.d_model, context=self.refiner_context
        )

    @property
    def max_window(self):
        return max(self.branch_lengths)

    @property
    def train_span(self):
        """Raw frames needed so every window frame has a full refiner context."""
        if not self.refiner_enabled:
            return self.max_window
        return self.max_window + self.refiner_context - 1

    def to_dict(self):
        d = dataclasses.asdict(self)
        d.pop("refiner", None)
        d["branch_lengths"] = list(self.branch_lengths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["branch_lengths"] = tuple(d["branch_lengths"])
        known = {f.name for f in dataclasses.fields(cls) if f.init}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Prediction:
    """Model output for one second of one video."""

    video_id: str
    t: int
    probs: np.ndarray
    spi: float = None

    @property
    def phase(self):
        return int(np.argmax(self.probs))


class Model:
    """Parameter container plus the structured views the forward pass uses."""

    def __init__(self, config, refiner, branches, fuse_w, fuse_b, phase_w, phase_b, spi_w, spi_b):
        self.config = config
        self.refiner = refiner
        self.branches = branches
        self.fuse_w = fuse_w
        self.fuse_b = fuse_b
        self.phase_w = phase_w
        self.phase_b = phase_b
        self.spi_w = spi_w
        self.spi_b = spi_b
        named = ft.named_tensors(refiner, "refiner")
        for bi, layers in enumerate(branches):
            for li, lp in enumerate(layers):
                named.extend(ft.named_tensors(lp, f"branch{bi}.layer{li}"))
        named.extend(
            [
                ("fuse.w", fuse_w),
                ("fuse.b", fuse_b),
                ("phase.w", phase_w),
                ("phase.b", phase_b),
            ]
        )
        if spi_w is not None:
            named.extend([("spi.w", spi_w), ("spi.b", spi_b)])
        self.params = dict(sorted(named))

    def param_count(self):
        return int(sum(p.data.size for p in self.params.values()))


def build(config: ModelConfig, seed=0) -> Model:
    """Construct a model with seeded initialization.

    Weights are uniform on [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero,
    layer-norm gains one. Draw order is fixed (refiner, then branches in
    order, then fuse and heads), so equal seeds give identical parameters.
    """
    rng = np.random.default_rng(seed)
    d = config.d_model

    def weight(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return ad.Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)

    def zeros(shape):
        return ad.Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    def ones(shape):
        return ad.Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    def attn_params():
        return ft.AttnParams(
            wq=weight(d, (d, d)), bq=zeros(d),
            wk=weight(d, (d, d)),
            wv=weight(d, (d, d)), bv=zeros(d),
            wo=weight(d, (d, d)), bo=zeros(d),
        )

    refiner = ft.RefinerParams(wp=weight(config.d_in, (config.d_in, d)), bp=zeros(d), attn=attn_params())

    branches = []
    for _ in config.branch_lengths:
        layers = []
        for _ in range(config.layers):
            hidden = config.ffn_mult * d
            layers.append(
                ft.TceLayerParams(
                    ln1_g=ones(d), ln1_b=zeros(d),
                    attn=attn_params(),
                    ln2_g=ones(d), ln2_b=zeros(d),
                    w1=weight(d, (d, hidden)), b1=zeros(hidden),
                    w2=weight(hidden, (hidden, d)), b2=zeros(d),
                )
            )
        branches.append(layers)

    fused_in = len(config.branch_lengths) * d
    fuse_w = weight(fused_in, (fused_in, d))
    fuse_b = zeros(d)
    phase_w = weight(d, (d, config.num_phases))
    phase_b = zeros(config.num_phases)
    spi_w = weight(d, (d, 1)) if config.spi_head else None
    spi_b = zeros(1) if config.spi_head else None
    return Model(config, refiner, branches, fuse_w, fuse_b, phase_w, phase_b, spi_w, spi_b)


def forward(model: Model, branch_blocks):
    """Heads over already-windowed refined blocks, one (B, n_b, d) per branch.

    Returns (phase probabilities (B, P), progress (B,) or None).
    """
    cfg = model.config
    if len(branch_blocks) != len(cfg.branch_lengths):
        raise ShapeError(
            f"expected {len(cfg.branch_lengths)} branch blocks, got {len(branch_blocks)}"
        )
    encoded = [
        ft.encode(block, layers, cfg.heads)
        for block, layers in zip(branch_blocks, model.branches)
    ]
    cat = encoded[0] if len(encoded) == 1 else ad.concat(encoded, axis=-1)
    fused = ad.add(ad.matmul(cat, model.fuse_w), model.fuse_b)
    probs = ad.softmax(ad.add(ad.matmul(fused, model.phase_w), model.phase_b), axis=-1)
    spi = None
    if cfg.spi_head:
        raw = ad.add(ad.matmul(fused, model.spi_w), model.spi_b)
        spi = ad.reshape(ad.sigmoid(raw), (fused.shape[0],))
    return probs, spi


def full_forward(model: Model, x):
    """Forward from raw frames (B, L, d_in); predictions are for the last frame.

    L must be at least config.train_span so that every frame of the longest
    window carries a full refiner context. Windows are the trailing n_b
    refined positions per branch.
    """
    cfg = model.config
    if not isinstance(x, ad.Tensor):
        x = ad.Tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"expected (B, L, d_in) input, got shape {x.shape}")
    length = x.shape[1]
    if length < cfg.train_span:
        raise ShapeError(f"input span {length} < required {cfg.train_span}")
    refined = ft.refine(x, model.refiner, cfg.refiner, enabled=cfg.refiner_enabled)
    blocks = [
        ad.take(refined, np.arange(length - n, length), axis=1) for n in cfg.branch_lengths
    ]
    return forward(model, blocks)


def predict_video(model: Model, seq: ft.FeatureSequence, chunk=512):
    """Online per-second predictions for a whole video.

    The sequence is refined once; windows are then cut per second with the
    frame-0 padding rule, exactly matching the per-sample training path.
    Runs without gradient recording, in chunks of prediction seconds.
    """
    cfg = model.config
    if seq.dim != cfg.d_in:
        raise ShapeError(f"video {seq.video_id!r} has dim {seq.dim}, model expects {cfg.d_in}")
    t_total = seq.num_frames
    out = []
    with ad.no_grad():
        refined = ft.refine(
            ad.Tensor(seq.matrix[None]), model.refiner, cfg.refiner, enabled=cfg.refiner_enabled
        )
        d = refined.shape[-1]
        for start in range(0, t_total, chunk):
            ts = np.arange(start, min(start + chunk, t_total))
            blocks = []
            for n in cfg.branch_lengths:
                idx = np.maximum(ts[:, None] + np.arange(-n + 1, 1)[None, :], 0)
                blocks.append(ad.reshape(ad.take(refined, idx, axis=1), (len(ts), n, d)))
            probs, spi = forward(model, blocks)
            for i, t in enumerate(ts):
                out.append(
                    Prediction(
                        video_id=seq.video_id,
                        t=int(t),
                        probs=probs.data[i].copy(),
                        spi=float(spi.data[i]) if spi is not None else None,
                    )
                )
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model):
    """Binary checkpoint: config JSON + named parameters + integrity checksum."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    cfg_bytes = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(cfg_bytes))
    blob += cfg_bytes
    blob += struct.pack("<I", len(model.params))
    for name in sorted(model.params):
        data = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        nb = name.encode()
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()[:8]
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file (bad magic)")
    body, tail = blob[:-8], blob[-8:]
    if hashlib.sha256(body).digest()[:8] != tail:
        raise ValidationError(f"{path}: checkpoint checksum mismatch (file corrupted)")
    off = 4
    version, cfg_len = struct.unpack_from("<II", body, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    config = ModelConfig.from_dict(json.loads(body[off : off + cfg_len].decode()))
    off += cfg_len
    (n_params,) = struct.unpack_from("<I", body, off)
    off += 4
    model = build(config, seed=0)
    if n_params != len(model.params):
        raise ValidationError(
            f"{path}: checkpoint has {n_params} parameters, config implies {len(model.params)}"
        )
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        if name not in model.params:
            raise ValidationError(f"{path}: unexpected parameter {name!r} in checkpoint")
        target = model.params[name]
        if target.data.shape != tuple(shape):
            raise ValidationError(
                f"{path}: parameter {name!r} has shape {tuple(shape)}, expected {target.data.shape}"
            )
        target.data = data.copy()
    if off != len(body):
        raise ValidationError(f"{path}: trailing bytes in checkpoint")
    return model
