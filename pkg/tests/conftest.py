"""Shared builders for small, fast test fixtures."""

import numpy as np
import pytest

from phaserec import annotations as an
from phaserec import features as ft
from phaserec import model as md
from phaserec import spi as spi_mod
from phaserec import training as tr


def small_taxonomy(n=3):
    return md.PhaseTaxonomy(tuple(f"p{i}" for i in range(n)))


def small_spec(taxonomy=None, **overrides):
    taxonomy = taxonomy or small_taxonomy()
    kwargs = dict(
        taxonomy=taxonomy,
        mean_durations=(30.0, 40.0, 35.0),
        missing_prob=None,
        n_videos=4,
        feature_dim=6,
        separation=5.0,
        noise=1.0,
        duration_jitter=0.1,
        drift_strength=1.0,
        drift_noise=0.3,
    )
    kwargs.update(overrides)
    return an.SynthSpec(**kwargs)


def small_model_config(num_phases=3, **overrides):
    kwargs = dict(
        num_phases=num_phases,
        d_in=6,
        d_model=8,
        heads=2,
        layers=1,
        ffn_mult=2,
        branch_lengths=(6,),
        refiner_heads=2,
        refiner_context=6,
    )
    kwargs.update(overrides)
    return md.ModelConfig(**kwargs)


@pytest.fixture(scope="session")
def tiny_samples():
    """Four short synthetic videos paired with progress targets."""
    spec = small_spec()
    sequences, tracks = an.synth_generate(spec, seed=5)
    table = spi_mod.transition_table(tracks, spec.taxonomy)
    return tr.make_samples(sequences, tracks, table), spec.taxonomy


@pytest.fixture(scope="session")
def tiny_model():
    return md.build(small_model_config(), seed=1)


def rng(seed=0):
    return np.random.default_rng(seed)


def rebuild_model(cfg, by):
    """Assemble a Model from a name -> tensor mapping.

    Gradient checks perturb flat tensor lists; this maps them back into the
    structured form the forward pass needs, using the same names the model
    itself exposes via .params.
    """

    def attn(prefix):
        fields = ("wq", "bq", "wk", "wv", "bv", "wo", "bo")
        return ft.AttnParams(**{f: by[f"{prefix}.{f}"] for f in fields})

    refiner = ft.RefinerParams(
        wp=by["refiner.wp"], bp=by["refiner.bp"], attn=attn("refiner.attn")
    )
    branches = []
    for bi in range(len(cfg.branch_lengths)):
        layers = []
        for li in range(cfg.layers):
            p = f"branch{bi}.layer{li}"
            layers.append(
                ft.TceLayerParams(
                    ln1_g=by[f"{p}.ln1_g"], ln1_b=by[f"{p}.ln1_b"],
                    attn=attn(f"{p}.attn"),
                    ln2_g=by[f"{p}.ln2_g"], ln2_b=by[f"{p}.ln2_b"],
                    w1=by[f"{p}.w1"], b1=by[f"{p}.b1"],
                    w2=by[f"{p}.w2"], b2=by[f"{p}.b2"],
                )
            )
        branches.append(layers)
    return md.Model(
        cfg, refiner, branches, by["fuse.w"], by["fuse.b"],
        by["phase.w"], by["phase.b"], by.get("spi.w"), by.get("spi.b"),
    )
