"""Model assembly: config, initialization, forward paths, checkpoints."""

import hashlib
import struct

import numpy as np
import pytest

from phaserec import autodiff as ad
from phaserec import features as ft
from phaserec import model as md
from phaserec.errors import ShapeError, ValidationError


def rng(seed=0):
    return np.random.default_rng(seed)


def tiny_config(**over):
    base = dict(num_phases=3, d_in=5, d_model=8, heads=2, layers=1,
                branch_lengths=(4,), refiner_context=4)
    base.update(over)
    return md.ModelConfig(**base)


# ---------------------------------------------------------------------------
# taxonomy


def test_taxonomy_validation():
    with pytest.raises(ValidationError):
        md.PhaseTaxonomy(("only",))
    with pytest.raises(ValidationError):
        md.PhaseTaxonomy(("a", "a"))
    with pytest.raises(ValidationError):
        md.PhaseTaxonomy(("a", "b,c"))
    with pytest.raises(ValidationError):
        md.PhaseTaxonomy(("a", ""))
    tax = md.PhaseTaxonomy(("prep", "dissect", "close"))
    assert tax.num_phases == 3
    assert tax.index("dissect") == 1
    with pytest.raises(ValidationError):
        tax.index("unknown")


def test_taxonomy_file_round_trip(tmp_path):
    tax = md.PhaseTaxonomy(("prep", "dissect", "close"))
    path = tmp_path / "taxonomy.txt"
    tax.to_file(path)
    assert md.PhaseTaxonomy.from_file(path) == tax


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ValidationError):
        tiny_config(num_phases=1)
    with pytest.raises(ValidationError):
        tiny_config(d_model=9)  # not divisible by heads
    with pytest.raises(ValidationError):
        tiny_config(branch_lengths=())
    with pytest.raises(ValidationError):
        tiny_config(branch_lengths=(4, 4))
    with pytest.raises(ValidationError):
        tiny_config(branch_lengths=(4, 0))
    with pytest.raises(ValidationError):
        tiny_config(d_in=0)
    with pytest.raises(ValidationError):
        tiny_config(d_model=8, refiner_heads=3)


def test_config_window_and_span():
    cfg = tiny_config(branch_lengths=(4, 2), refiner_context=6)
    assert cfg.max_window == 4
    assert cfg.train_span == 4 + 6 - 1
    off = tiny_config(branch_lengths=(4, 2), refiner_context=6, refiner_enabled=False)
    assert off.train_span == 4


def test_config_dict_round_trip():
    cfg = tiny_config(branch_lengths=(4, 2), spi_head=False)
    again = md.ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ValidationError):
        md.ModelConfig.from_dict(dict(cfg.to_dict(), mystery=1))


# ---------------------------------------------------------------------------
# initialization


def test_build_is_deterministic_per_seed():
    a = md.build(tiny_config(), seed=3)
    b = md.build(tiny_config(), seed=3)
    c = md.build(tiny_config(), seed=4)
    assert list(a.params) == list(b.params) == list(c.params)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    assert any(
        a.params[n].data.tobytes() != c.params[n].data.tobytes() for n in a.params
    )


def test_build_biases_zero_gains_one():
    model = md.build(tiny_config(), seed=0)
    for name, p in model.params.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("b") or leaf.endswith("_b"):
            assert not p.data.any(), name
        if leaf.endswith("_g"):
            assert (p.data == 1.0).all(), name


def test_param_count_matches_hand_total():
    model = md.build(tiny_config(), seed=0)
    # refiner 328 = wp 40 + bp 8 + attention 280 (4 weight matrices of 64
    # plus three 8-wide biases); one encoder layer 592; fuse 72; phase head
    # 27; progress head 9
    assert model.param_count() == 328 + 592 + 72 + 27 + 9 == 1028


# ---------------------------------------------------------------------------
# forward


def test_forward_probability_rows_and_progress_range():
    cfg = tiny_config()
    model = md.build(cfg, seed=1)
    x = rng(2).standard_normal((6, cfg.train_span, cfg.d_in)).astype(np.float32)
    with ad.no_grad():
        probs, spi = md.full_forward(model, x)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, rtol=1e-5)
    assert probs.data.min() >= 0.0
    assert spi.data.shape == (6,)
    assert np.all((spi.data > 0.0) & (spi.data < 1.0))


def test_forward_without_progress_head():
    cfg = tiny_config(spi_head=False)
    model = md.build(cfg, seed=1)
    assert "spi.w" not in model.params
    x = rng(3).standard_normal((2, cfg.train_span, cfg.d_in)).astype(np.float32)
    with ad.no_grad():
        probs, spi = md.full_forward(model, x)
    assert spi is None
    assert probs.data.shape == (2, 3)


def test_full_forward_rejects_bad_shapes():
    cfg = tiny_config()
    model = md.build(cfg, seed=0)
    with pytest.raises(ShapeError):
        md.full_forward(model, np.zeros((4, cfg.d_in), dtype=np.float32))
    with pytest.raises(ShapeError):
        md.full_forward(
            model, np.zeros((1, cfg.train_span - 1, cfg.d_in), dtype=np.float32)
        )


def test_forward_rejects_wrong_branch_block_count():
    cfg = tiny_config(branch_lengths=(4, 2))
    model = md.build(cfg, seed=0)
    block = ad.Tensor(np.zeros((1, 4, cfg.d_model), dtype=np.float32))
    with pytest.raises(ShapeError):
        md.forward(model, [block])


# ---------------------------------------------------------------------------
# per-video prediction vs the training-style forward


def test_predict_video_matches_training_forward_at_every_second():
    cfg = tiny_config()
    model = md.build(cfg, seed=5)
    r = rng(6)
    mat = r.standard_normal((12, cfg.d_in)).astype(np.float32)
    seq = ft.FeatureSequence("v0", mat)
    preds = md.predict_video(model, seq)
    assert [p.t for p in preds] == list(range(12))

    span = cfg.train_span
    rel = np.arange(-span + 1, 1)
    for t in range(12):
        idx = np.maximum(t + rel, 0)
        x = mat[idx][None]
        with ad.no_grad():
            probs, spi = md.full_forward(model, x)
        np.testing.assert_allclose(
            preds[t].probs, probs.data[0], rtol=1e-5, atol=1e-6
        )
        assert abs(preds[t].spi - float(spi.data[0])) < 1e-5


def test_predict_video_chunking_is_invisible():
    cfg = tiny_config()
    model = md.build(cfg, seed=7)
    seq = ft.FeatureSequence("v1", rng(8).standard_normal((11, cfg.d_in)).astype(np.float32))
    a = md.predict_video(model, seq, chunk=3)
    b = md.predict_video(model, seq, chunk=512)
    for pa, pb in zip(a, b):
        np.testing.assert_allclose(pa.probs, pb.probs, rtol=1e-6, atol=1e-7)
        assert abs(pa.spi - pb.spi) < 1e-6


def test_predict_video_rejects_wrong_dim():
    model = md.build(tiny_config(), seed=0)
    seq = ft.FeatureSequence("v", np.zeros((4, 3), dtype=np.float32))
    with pytest.raises(ShapeError):
        md.predict_video(model, seq)


def test_prediction_phase_is_argmax():
    p = md.Prediction("v", 0, np.array([0.2, 0.5, 0.3]))
    assert p.phase == 1


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    cfg = tiny_config(branch_lengths=(4, 2))
    model = md.build(cfg, seed=9)
    path = tmp_path / "m.ckpt"
    md.save_checkpoint(path, model)
    back = md.load_checkpoint(path)
    assert back.config == cfg
    assert list(back.params) == list(model.params)
    for name in model.params:
        assert back.params[name].data.tobytes() == model.params[name].data.tobytes()


def test_checkpoint_rejects_corruption(tmp_path):
    model = md.build(tiny_config(), seed=0)
    path = tmp_path / "m.ckpt"
    md.save_checkpoint(path, model)
    blob = bytearray(path.read_bytes())

    flipped = bytearray(blob)
    flipped[len(flipped) // 2] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(ValidationError, match="checksum"):
        md.load_checkpoint(tmp_path / "flip.ckpt")

    (tmp_path / "trunc.ckpt").write_bytes(bytes(blob[:-9]))
    with pytest.raises(ValidationError):
        md.load_checkpoint(tmp_path / "trunc.ckpt")

    bad_magic = bytearray(blob)
    bad_magic[:4] = b"XXXX"
    (tmp_path / "magic.ckpt").write_bytes(bytes(bad_magic))
    with pytest.raises(ValidationError, match="magic"):
        md.load_checkpoint(tmp_path / "magic.ckpt")


def _rewrite_checksum(blob):
    body = bytes(blob[:-8])
    return body + hashlib.sha256(body).digest()[:8]


def test_checkpoint_rejects_unknown_version(tmp_path):
    model = md.build(tiny_config(), seed=0)
    path = tmp_path / "m.ckpt"
    md.save_checkpoint(path, model)
    blob = bytearray(path.read_bytes())
    struct.pack_into("<I", blob, 4, 99)
    (tmp_path / "ver.ckpt").write_bytes(_rewrite_checksum(blob))
    with pytest.raises(ValidationError, match="version"):
        md.load_checkpoint(tmp_path / "ver.ckpt")


def test_checkpoint_rejects_parameter_shape_mismatch(tmp_path):
    model = md.build(tiny_config(), seed=0)
    path = tmp_path / "m.ckpt"
    md.save_checkpoint(path, model)
    blob = bytearray(path.read_bytes())
    # edit the embedded config (same byte length) so stored tensors no
    # longer match what the config implies
    i = bytes(blob).index(b'"d_in":5')
    blob[i : i + 8] = b'"d_in":7'
    (tmp_path / "dim.ckpt").write_bytes(_rewrite_checksum(blob))
    with pytest.raises(ValidationError, match="shape"):
        md.load_checkpoint(tmp_path / "dim.ckpt")
