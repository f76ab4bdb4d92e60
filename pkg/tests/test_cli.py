"""End-to-end and unit coverage for the command-line surface.

The pipeline tests drive ``main(argv)`` exactly as a shell would, on a small
synthetic corpus, and assert on exit codes, emitted files, and run-to-run
byte determinism.
"""

import configparser
import os

import numpy as np
import pytest

from phaserec import annotations as an
from phaserec import cli
from phaserec import evaluate as ev
from phaserec import features as ft
from phaserec import model as md
from phaserec import spi as spi_mod
from phaserec.errors import NumericError, ValidationError

CONFIG_TEXT = """\
[run]
seed = 3
spi_mode = scaled

[synth]
phases = prep, resect, close
mean_durations = 30, 40, 35
n_videos = 4
feature_dim = 6
separation = 5.0
noise = 1.0
duration_jitter = 0.1

[model]
d_in = 6
d_model = 8
heads = 2
layers = 1
branch_lengths = 6
refiner_context = 6

[loss]
lam = 0.5

[optim]
lr0 = 1e-3
decay = 0.5
decay_every = 2
epochs = 2
batch = 32

[split]
mode = fixed
n_train = 3
"""


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.ini"
    path.write_text(CONFIG_TEXT)
    return str(path)


@pytest.fixture(scope="module")
def corpus_dir(config_path, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("corpus"))
    assert cli.main(["synth", "--config", config_path, "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(config_path, corpus_dir, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    code = cli.main(["train", "--config", config_path,
                     "--data", corpus_dir, "--out", out])
    assert code == 0
    return out


# ---------------------------------------------------------------------------
# worker_count

def test_worker_count_env_override(monkeypatch):
    monkeypatch.setenv("PHASEREC_THREADS", "4")
    assert cli.worker_count() == 4


def test_worker_count_default_is_cpu_count(monkeypatch):
    monkeypatch.delenv("PHASEREC_THREADS", raising=False)
    assert cli.worker_count() == (os.cpu_count() or 1)


@pytest.mark.parametrize("bad", ["0", "-2", "abc", "1.5"])
def test_worker_count_rejects_bad_values(monkeypatch, bad):
    monkeypatch.setenv("PHASEREC_THREADS", bad)
    with pytest.raises(ValidationError, match="PHASEREC_THREADS"):
        cli.worker_count()


# ---------------------------------------------------------------------------
# config file parsing

def test_load_config_reads_sections(config_path):
    cfg = cli.load_config(config_path)
    assert cfg["model"]["d_model"] == "8"
    assert cfg["synth"]["phases"] == "prep, resect, close"
    assert cfg["run"]["seed"] == "3"


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ValidationError, match="config file not found"):
        cli.load_config(str(tmp_path / "nope.ini"))


def test_load_config_unknown_section_names_line(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[run]\nseed = 1\n\n[bogus]\nx = 2\n")
    with pytest.raises(ValidationError, match=r"'\[bogus\]' at line 4"):
        cli.load_config(str(path))


def test_load_config_unknown_key_names_line(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[model]\nd_model = 8\nwrong = 1\n")
    with pytest.raises(ValidationError, match=r"'\[model\] wrong' at line 3"):
        cli.load_config(str(path))


def test_load_config_malformed_ini(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("seed = 1\n")  # key before any section header
    with pytest.raises(ValidationError, match="config parse failure"):
        cli.load_config(str(path))


def test_load_config_set_override(config_path):
    cfg = cli.load_config(config_path, sets=("model.d_model=16",))
    assert cfg["model"]["d_model"] == "16"
    # sections absent from the file can still be targeted
    cfg = cli.load_config(config_path, sets=("run.out=/tmp/x",))
    assert cfg["run"]["out"] == "/tmp/x"


@pytest.mark.parametrize("item,msg", [
    ("model.d_model", "expects section.key=value"),
    ("d_model=16", "expects section.key=value"),
    ("model.zzz=1", "unknown config key"),
    ("nosuch.d_model=1", "unknown config key"),
])
def test_load_config_set_rejects(config_path, item, msg):
    with pytest.raises(ValidationError, match=msg):
        cli.load_config(config_path, sets=(item,))


def test_typed_value_errors_name_key(config_path):
    cfg = cli.load_config(config_path)
    cfg["model"]["d_in"] = "hello"
    with pytest.raises(ValidationError,
                       match=r"'\[model\] d_in': expected an integer"):
        cli.model_config(cfg, 3)
    cfg2 = cli.load_config(config_path)
    cfg2["model"]["refiner_enabled"] = "maybe"
    with pytest.raises(ValidationError, match="expected a boolean"):
        cli.model_config(cfg2, 3)


def test_synth_spec_requires_section_and_phases(config_path):
    with pytest.raises(ValidationError, match=r"\[synth\] section"):
        cli.synth_spec({"run": {"seed": "0"}})
    cfg = cli.load_config(config_path)
    del cfg["synth"]["phases"]
    with pytest.raises(ValidationError, match=r"'\[synth\] phases' is required"):
        cli.synth_spec(cfg)


# ---------------------------------------------------------------------------
# ablation flag parsing

def test_parse_ablation():
    assert cli.parse_ablation(None) == {}
    assert cli.parse_ablation("") == {}
    assert cli.parse_ablation("spi=off,stfeat=on") == {"spi": False, "stfeat": True}
    assert cli.parse_ablation(" spi = OFF ") == {"spi": False}


@pytest.mark.parametrize("raw,msg", [
    ("spi", "expects name=on|off"),
    ("foo=on", "unknown ablation toggle"),
    ("spi=maybe", "must be on or off"),
])
def test_parse_ablation_rejects(raw, msg):
    with pytest.raises(ValidationError, match=msg):
        cli.parse_ablation(raw)


# ---------------------------------------------------------------------------
# synth

def test_synth_writes_corpus(corpus_dir):
    for name in ("annotations.csv", "taxonomy.txt", "manifest.csv", "resolved.ini"):
        assert os.path.exists(os.path.join(corpus_dir, name))
    sequences, tracks, taxonomy = an.load_corpus(corpus_dir)
    assert len(sequences) == len(tracks) == 4
    assert taxonomy.names == ("prep", "resect", "close")
    assert all(s.matrix.shape[1] == 6 for s in sequences)


def test_synth_resolved_config_round_trips(corpus_dir):
    resolved = os.path.join(corpus_dir, "resolved.ini")
    cfg = cli.load_config(resolved)
    assert cfg["run"]["seed"] == "3"
    assert cfg["model"]["d_model"] == "8"


def test_synth_seed_flag_and_determinism(config_path, tmp_path):
    out7a, out7b = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli.main(["synth", "--config", config_path,
                     "--seed", "7", "--out", out7a]) == 0
    assert cli.main(["synth", "--config", config_path,
                     "--seed", "7", "--out", out7b]) == 0
    cfg = cli.load_config(os.path.join(out7a, "resolved.ini"))
    assert cfg["run"]["seed"] == "7"
    for name in ("annotations.csv", "manifest.csv"):
        a = open(os.path.join(out7a, name), "rb").read()
        b = open(os.path.join(out7b, name), "rb").read()
        assert a == b
    feats = sorted(os.listdir(os.path.join(out7a, "features")))
    assert feats
    for name in feats:
        a = open(os.path.join(out7a, "features", name), "rb").read()
        b = open(os.path.join(out7b, "features", name), "rb").read()
        assert a == b


def test_synth_needs_out(config_path):
    assert cli.main(["synth", "--config", config_path]) == 2


# ---------------------------------------------------------------------------
# stats / spi-table

def test_stats_renders_summary(corpus_dir, capsys):
    assert cli.main(["stats", "--annotations", corpus_dir]) == 0
    out = capsys.readouterr().out
    assert "videos: 4 (4 complete)" in out
    for name in ("prep", "resect", "close"):
        assert name in out


def test_stats_missing_directory(tmp_path, capsys):
    code = cli.main(["stats", "--annotations", str(tmp_path / "nope")])
    assert code == 2
    assert capsys.readouterr().err.startswith("error:")


def test_spi_table_prints_and_writes(corpus_dir, tmp_path, capsys):
    out = str(tmp_path / "table.csv")
    assert cli.main(["spi-table", "--annotations", corpus_dir, "--out", out]) == 0
    stdout = capsys.readouterr().out
    for name in ("prep", "resect", "close"):
        assert name in stdout
    table = spi_mod.TransitionTable.from_csv(out)
    assert table.names == ("prep", "resect", "close")
    assert table.boundaries[-1] == pytest.approx(1.0, abs=1e-9)
    assert all(b > a for a, b in zip(table.boundaries, table.boundaries[1:]))


# ---------------------------------------------------------------------------
# train

def test_train_emits_artifacts(run_dir):
    for name in ("log.csv", "best.ckpt", "final.ckpt", "report.csv", "resolved.ini"):
        assert os.path.exists(os.path.join(run_dir, name))
    model = md.load_checkpoint(os.path.join(run_dir, "final.ckpt"))
    assert model.config.d_model == 8
    assert model.config.spi_head is True
    report = ev.read_report(os.path.join(run_dir, "report.csv"))
    assert report.mode == "pooled"
    assert report.frames > 0
    assert report.spi_mae is not None
    log_lines = open(os.path.join(run_dir, "log.csv")).read().splitlines()
    assert log_lines[0] == ",".join(cli.tr.LOG_HEADER)
    assert len(log_lines) == 1 + 2  # header + one row per epoch


def test_train_is_deterministic(config_path, corpus_dir, run_dir, tmp_path):
    out = str(tmp_path / "again")
    assert cli.main(["train", "--config", config_path,
                     "--data", corpus_dir, "--out", out]) == 0
    for name in ("final.ckpt", "best.ckpt", "log.csv"):
        a = open(os.path.join(run_dir, name), "rb").read()
        b = open(os.path.join(out, name), "rb").read()
        assert a == b, f"{name} differs between identical runs"


def test_train_ablation_disables_progress_head(config_path, corpus_dir, tmp_path):
    out = str(tmp_path / "nospi")
    assert cli.main(["train", "--config", config_path, "--data", corpus_dir,
                     "--out", out, "--ablation", "spi=off"]) == 0
    model = md.load_checkpoint(os.path.join(out, "final.ckpt"))
    assert model.config.spi_head is False
    assert "spi.w" not in model.params
    report = ev.read_report(os.path.join(out, "report.csv"))
    assert report.spi_mae is None
    rows = open(os.path.join(out, "log.csv")).read().splitlines()[1:]
    assert rows and all(row.endswith(",") for row in rows)  # empty spi column


def test_train_needs_data_and_out(config_path, corpus_dir, capsys):
    assert cli.main(["train", "--config", config_path]) == 2
    assert "corpus directory" in capsys.readouterr().err
    assert cli.main(["train", "--config", config_path,
                     "--data", corpus_dir]) == 2
    assert "output directory" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval

def test_eval_scores_checkpoint(config_path, corpus_dir, run_dir, tmp_path, capsys):
    ckpt = os.path.join(run_dir, "final.ckpt")
    out = str(tmp_path / "report.csv")
    code = cli.main(["eval", "--config", config_path, "--data", corpus_dir,
                     "--checkpoint", ckpt, "--out", out,
                     "--ribbon", "synth003"])
    assert code == 0
    stdout = capsys.readouterr().out
    assert "accuracy" in stdout
    report = ev.read_report(out)
    assert report.mode == "pooled"
    ribbon_base = str(tmp_path / "ribbon_synth003")
    assert os.path.exists(ribbon_base + ".svg")
    csv_lines = open(ribbon_base + ".csv").read().splitlines()
    assert csv_lines[0] == "t,truth,pred,spi_pred,spi_target"
    assert len(csv_lines) == 1 + report.frames


def test_eval_per_video_mode(config_path, corpus_dir, run_dir, tmp_path):
    ckpt = os.path.join(run_dir, "final.ckpt")
    out = str(tmp_path / "pv.csv")
    code = cli.main(["eval", "--config", config_path, "--data", corpus_dir,
                     "--checkpoint", ckpt, "--mode", "per-video", "--out", out])
    assert code == 0
    assert ev.read_report(out).mode == "per-video"


def test_eval_fold_out_of_range(config_path, corpus_dir, run_dir, capsys):
    ckpt = os.path.join(run_dir, "final.ckpt")
    code = cli.main(["eval", "--config", config_path, "--data", corpus_dir,
                     "--checkpoint", ckpt, "--fold", "5"])
    assert code == 2
    assert "out of range" in capsys.readouterr().err


def test_eval_ribbon_unknown_video(config_path, corpus_dir, run_dir, capsys):
    ckpt = os.path.join(run_dir, "final.ckpt")
    code = cli.main(["eval", "--config", config_path, "--data", corpus_dir,
                     "--checkpoint", ckpt, "--ribbon", "synth000"])
    assert code == 2
    assert "not in the eval fold" in capsys.readouterr().err


def test_eval_phase_count_mismatch(config_path, corpus_dir, run_dir, tmp_path,
                                   capsys):
    cfg5 = md.ModelConfig(num_phases=5, d_in=6, d_model=8, heads=2, layers=1,
                          branch_lengths=(6,), refiner_context=6)
    other = md.build(cfg5, seed=0)
    ckpt = str(tmp_path / "other.ckpt")
    md.save_checkpoint(ckpt, other)
    code = cli.main(["eval", "--config", config_path, "--data", corpus_dir,
                     "--checkpoint", ckpt])
    assert code == 2
    assert "phases" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# predict

def test_predict_with_taxonomy(corpus_dir, run_dir, tmp_path):
    ckpt = os.path.join(run_dir, "final.ckpt")
    feats = sorted(os.listdir(os.path.join(corpus_dir, "features")))[0]
    fpath = os.path.join(corpus_dir, "features", feats)
    out = str(tmp_path / "preds.csv")
    code = cli.main(["predict", "--checkpoint", ckpt, "--features", fpath,
                     "--taxonomy", os.path.join(corpus_dir, "taxonomy.txt"),
                     "--out", out])
    assert code == 0
    lines = open(out).read().splitlines()
    seq = ft.read_features(fpath)
    assert lines[0] == "t,phase,spi"
    assert len(lines) == 1 + seq.num_frames
    names = {"prep", "resect", "close"}
    for i, row in enumerate(lines[1:]):
        t, phase, spi = row.split(",")
        assert int(t) == i
        assert phase in names
        assert 0.0 < float(spi) < 1.0


def test_predict_numeric_labels_without_taxonomy(corpus_dir, run_dir, capsys):
    ckpt = os.path.join(run_dir, "final.ckpt")
    feats = sorted(os.listdir(os.path.join(corpus_dir, "features")))[0]
    fpath = os.path.join(corpus_dir, "features", feats)
    assert cli.main(["predict", "--checkpoint", ckpt, "--features", fpath]) == 0
    lines = capsys.readouterr().out.splitlines()
    phases = {row.split(",")[1] for row in lines[1:]}
    assert phases <= {"0", "1", "2"}


def test_predict_feature_dim_mismatch(run_dir, tmp_path, capsys):
    ckpt = os.path.join(run_dir, "final.ckpt")
    bad = str(tmp_path / "bad.prfv")
    seq = ft.FeatureSequence("bad", np.zeros((20, 4), dtype=np.float32))
    ft.write_features(bad, seq)
    code = cli.main(["predict", "--checkpoint", ckpt, "--features", bad])
    assert code == 2
    assert capsys.readouterr().err.startswith("error:")


# ---------------------------------------------------------------------------
# exit-code dispatch

def test_main_maps_numeric_error_to_exit_3(monkeypatch, capsys):
    def boom(args):
        raise NumericError("boom")
    monkeypatch.setattr(cli, "cmd_stats", boom)
    assert cli.main(["stats", "--annotations", "x"]) == 3
    assert capsys.readouterr().err.startswith("numeric failure: boom")


def test_main_requires_subcommand():
    with pytest.raises(SystemExit):
        cli.main([])
