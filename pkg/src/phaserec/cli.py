"""Command-line operator surface.

Subcommands bind the library into reproducible, config-file-driven workflows:

- ``stats``      summarize an annotation corpus (videos, per-phase seconds)
- ``spi-table``  derive average progress-transition boundaries from complete videos
- ``synth``      generate a seeded synthetic corpus
- ``train``      fit a model on a corpus split, logging and checkpointing
- ``eval``       score a checkpoint on the held-out side of a split
- ``predict``    emit one phase/progress prediction per second for a feature file

Configuration lives in one INI file (sections ``run``, ``synth``, ``model``,
``loss``, ``optim``, ``split``); ``--set section.key=value`` and the dedicated
flags override it. Unknown sections or keys are rejected with the offending
line number. Exit codes: 0 success, 2 validation error, 3 numeric failure.

``PHASEREC_THREADS`` caps worker threads (file parsing pools and, when set
before interpreter start, the BLAS/numba pools of the numeric backends).
"""

import os

_threads_env = os.environ.get("PHASEREC_THREADS", "").strip()
if _threads_env.isdigit() and int(_threads_env) > 0:
    for _var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS",
                 "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, _threads_env)

import argparse
import configparser
import glob
import sys
from concurrent.futures import ThreadPoolExecutor

from . import annotations as an
from . import evaluate as ev
from . import model as md
from . import spi as spi_mod
from . import training as tr
from .errors import NumericError, ValidationError
from .features import read_features


def worker_count():
    """Thread cap: PHASEREC_THREADS when set, else the CPU count."""
    raw = os.environ.get("PHASEREC_THREADS", "").strip()
    if raw:
        if not raw.isdigit() or int(raw) < 1:
            raise ValidationError(
                f"PHASEREC_THREADS must be a positive integer, got {raw!r}"
            )
        return int(raw)
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# config file handling

_SCHEMA = {
    "run": ("seed", "out", "data", "spi_mode"),
    "synth": (
        "phases", "mean_durations", "missing_prob", "n_videos", "feature_dim",
        "separation", "noise", "duration_jitter", "drift_strength",
        "drift_noise", "ambiguous_pair",
    ),
    "model": (
        "d_in", "d_model", "heads", "layers", "ffn_mult", "branch_lengths",
        "refiner_heads", "refiner_context", "refiner_enabled", "spi_head",
    ),
    "loss": ("lam",),
    "optim": ("lr0", "decay", "decay_every", "epochs", "batch",
              "beta1", "beta2", "eps"),
    "split": ("mode", "n_train", "k", "seed"),
}


def _key_line(text, section, key):
    """1-based line of ``key`` inside ``[section]`` (0 when not found)."""
    current = None
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
        elif current == section:
            head = stripped.split("=", 1)[0].split(":", 1)[0].strip()
            if head == key:
                return i
    return 0


def _section_line(text, section):
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped == f"[{section}]":
            return i
    return 0


def load_config(path, sets=()):
    """Parse an INI run config into {section: {key: value}} with overrides.

    Every referenced section/key is validated against the schema; failures
    name the key and its line in the file. ``sets`` entries look like
    ``section.key=value`` and are applied after the file is read.
    """
    if not os.path.exists(path):
        raise ValidationError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=(";", "#")
    )
    try:
        parser.read_string(text, source=path)
    except configparser.Error as exc:
        raise ValidationError(f"config parse failure in {path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ValidationError(
                f"unknown config section '[{section}]' at line "
                f"{_section_line(text, section)} of {path}"
            )
        out[section] = {}
        for key, value in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ValidationError(
                    f"unknown config key '[{section}] {key}' at line "
                    f"{_key_line(text, section, key)} of {path}"
                )
            out[section][key] = value.strip()
    for item in sets:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValidationError(
                f"--set expects section.key=value, got {item!r}"
            )
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        section, key = section.strip(), key.strip()
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ValidationError(f"--set names unknown config key '[{section}] {key}'")
        out.setdefault(section, {})[key] = value.strip()
    return out


def _typed(section, key, raw, conv, what):
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(
            f"config key '[{section}] {key}': expected {what}, got {raw!r}"
        ) from exc


def _get(cfg, section, key, conv, what, default):
    raw = cfg.get(section, {}).get(key)
    if raw is None:
        return default
    return _typed(section, key, raw, conv, what)


def _bool(raw):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(low)


def _floats(raw):
    return tuple(float(x) for x in raw.split(",") if x.strip())


def _ints(raw):
    return tuple(int(x) for x in raw.split(",") if x.strip())


def run_settings(cfg):
    return {
        "seed": _get(cfg, "run", "seed", int, "an integer", 0),
        "out": cfg.get("run", {}).get("out"),
        "data": cfg.get("run", {}).get("data"),
        "spi_mode": _get(cfg, "run", "spi_mode", str, "a string", "scaled"),
    }


def synth_spec(cfg):
    sec = cfg.get("synth")
    if not sec:
        raise ValidationError("config needs a [synth] section for this command")
    phases = _get(cfg, "synth", "phases", lambda r: tuple(
        x.strip() for x in r.split(",") if x.strip()), "a name list", None)
    if not phases:
        raise ValidationError("config key '[synth] phases' is required")
    taxonomy = md.PhaseTaxonomy(phases)
    kwargs = dict(
        taxonomy=taxonomy,
        mean_durations=_get(cfg, "synth", "mean_durations", _floats,
                            "a comma-separated float list", None),
        missing_prob=_get(cfg, "synth", "missing_prob", _floats,
                          "a comma-separated float list", None),
        n_videos=_get(cfg, "synth", "n_videos", int, "an integer", 20),
        feature_dim=_get(cfg, "synth", "feature_dim", int, "an integer", 16),
        separation=_get(cfg, "synth", "separation", float, "a float", 4.0),
        noise=_get(cfg, "synth", "noise", float, "a float", 1.0),
        duration_jitter=_get(cfg, "synth", "duration_jitter", float, "a float", 0.15),
        drift_strength=_get(cfg, "synth", "drift_strength", float, "a float", 1.0),
        drift_noise=_get(cfg, "synth", "drift_noise", float, "a float", 0.5),
        ambiguous_pair=_get(cfg, "synth", "ambiguous_pair", _ints,
                            "two phase indices", None),
    )
    if kwargs["mean_durations"] is None:
        raise ValidationError("config key '[synth] mean_durations' is required")
    return an.SynthSpec(**kwargs)


def model_config(cfg, num_phases):
    return md.ModelConfig(
        num_phases=num_phases,
        d_in=_get(cfg, "model", "d_in", int, "an integer", 2048),
        d_model=_get(cfg, "model", "d_model", int, "an integer", 128),
        heads=_get(cfg, "model", "heads", int, "an integer", 2),
        layers=_get(cfg, "model", "layers", int, "an integer", 2),
        ffn_mult=_get(cfg, "model", "ffn_mult", int, "an integer", 2),
        branch_lengths=_get(cfg, "model", "branch_lengths", _ints,
                            "a comma-separated integer list", (80,)),
        refiner_heads=_get(cfg, "model", "refiner_heads", int, "an integer", 2),
        refiner_context=_get(cfg, "model", "refiner_context", int, "an integer", 80),
        refiner_enabled=_get(cfg, "model", "refiner_enabled", _bool, "a boolean", True),
        spi_head=_get(cfg, "model", "spi_head", _bool, "a boolean", True),
    )


def loss_config(cfg, spi_on):
    lam = _get(cfg, "loss", "lam", float, "a float", 0.5)
    if not spi_on:
        lam = 1.0
    return tr.LossConfig(lam=lam, spi_enabled=spi_on)


def optim_config(cfg):
    return tr.OptimConfig(
        lr0=_get(cfg, "optim", "lr0", float, "a float", 5e-6),
        decay=_get(cfg, "optim", "decay", float, "a float", 0.1),
        decay_every=_get(cfg, "optim", "decay_every", int, "an integer", 10),
        epochs=_get(cfg, "optim", "epochs", int, "an integer", 30),
        batch=_get(cfg, "optim", "batch", int, "an integer", 32),
        beta1=_get(cfg, "optim", "beta1", float, "a float", 0.9),
        beta2=_get(cfg, "optim", "beta2", float, "a float", 0.999),
        eps=_get(cfg, "optim", "eps", float, "a float", 1e-8),
    )


def split_plan(cfg):
    return an.SplitPlan(
        mode=_get(cfg, "split", "mode", str, "fixed or cv", "fixed"),
        n_train=_get(cfg, "split", "n_train", int, "an integer", None),
        k=_get(cfg, "split", "k", int, "an integer", 5),
        seed=_get(cfg, "split", "seed", int, "an integer", 0),
    )


def parse_ablation(raw):
    """'spi=off,stfeat=on' -> {'spi': False, 'stfeat': True}."""
    toggles = {}
    if not raw:
        return toggles
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ValidationError(f"--ablation expects name=on|off, got {part!r}")
        name, state = (x.strip().lower() for x in part.split("=", 1))
        if name not in ("spi", "stfeat"):
            raise ValidationError(f"unknown ablation toggle {name!r} (use spi, stfeat)")
        if state not in ("on", "off"):
            raise ValidationError(f"ablation state for {name!r} must be on or off")
        toggles[name] = state == "on"
    return toggles


def write_resolved(path, cfg, seed):
    """Record the effective configuration (root seed included) next to outputs."""
    parser = configparser.ConfigParser(interpolation=None)
    merged = {k: dict(v) for k, v in cfg.items()}
    merged.setdefault("run", {})["seed"] = str(seed)
    for section in sorted(merged):
        parser[section] = {k: str(v) for k, v in sorted(merged[section].items())}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


# ---------------------------------------------------------------------------
# corpus loading helpers

def _load_tracks(directory):
    """Parse every annotation CSV under ``directory`` (taxonomy.txt beside them)."""
    if not os.path.isdir(directory):
        raise ValidationError(f"annotation directory not found: {directory}")
    tax_path = os.path.join(directory, "taxonomy.txt")
    if not os.path.exists(tax_path):
        raise ValidationError(f"missing taxonomy file: {tax_path}")
    taxonomy = md.PhaseTaxonomy.from_file(tax_path)
    paths = sorted(
        p for p in glob.glob(os.path.join(directory, "*.csv"))
        if os.path.basename(p) != "manifest.csv"
    )
    if not paths:
        raise ValidationError(f"no annotations found under {directory}")
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        per_file = list(pool.map(lambda p: an.read_annotations(p, taxonomy), paths))
    tracks, seen = [], set()
    for batch in per_file:
        for track in batch:
            if track.video_id in seen:
                raise ValidationError(f"duplicate video id across files: {track.video_id!r}")
            seen.add(track.video_id)
            tracks.append(track)
    return tracks, taxonomy


def _split_samples(samples, plan):
    ids = [s.features.video_id for s in samples]
    splits = an.make_splits(ids, plan)
    by_id = {s.features.video_id: s for s in samples}
    return [
        ([by_id[v] for v in split.train_ids], [by_id[v] for v in split.eval_ids])
        for split in splits
    ]


def _train_table(train_tracks, taxonomy, spi_mode):
    """Transition boundaries from the training side only (no eval leakage)."""
    complete = [t for t in train_tracks if len(t.phases_present) == taxonomy.num_phases]
    if spi_mode not in ("scaled", "literal"):
        raise ValidationError(f"spi_mode must be 'scaled' or 'literal', got {spi_mode!r}")
    if not complete:
        raise ValidationError("no complete training videos to derive transition boundaries")
    return spi_mod.transition_table(complete, taxonomy)


# ---------------------------------------------------------------------------
# subcommands

def cmd_stats(args):
    tracks, taxonomy = _load_tracks(args.annotations)
    stats = an.dataset_stats(tracks, taxonomy)
    print(stats.render())
    return 0


def cmd_spi_table(args):
    tracks, taxonomy = _load_tracks(args.annotations)
    incomplete = [t.video_id for t in tracks
                  if len(t.phases_present) != taxonomy.num_phases]
    if incomplete:
        print("warning: excluding incomplete videos: " + ", ".join(incomplete),
              file=sys.stderr)
    complete = [t for t in tracks if len(t.phases_present) == taxonomy.num_phases]
    if not complete:
        raise ValidationError("no complete videos; cannot derive transition boundaries")
    table = spi_mod.transition_table(complete, taxonomy)
    for name, boundary in zip(table.names, table.boundaries):
        print(f"{name}: {boundary:.6f}")
    if args.out:
        table.to_csv(args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_synth(args):
    cfg = load_config(args.config, args.set or ())
    run = run_settings(cfg)
    seed = args.seed if args.seed is not None else run["seed"]
    out = args.out or run["out"]
    if not out:
        raise ValidationError("synth needs an output directory ([run] out or --out)")
    spec = synth_spec(cfg)
    sequences, tracks = an.synth_generate(spec, seed=seed)
    os.makedirs(out, exist_ok=True)
    an.write_corpus(out, sequences, tracks, spec.taxonomy)
    write_resolved(os.path.join(out, "resolved.ini"), cfg, seed)
    total = sum(s.num_frames for s in sequences)
    print(f"wrote {len(sequences)} videos ({total} frames) to {out}")
    return 0


def _prepare_run(args):
    """Shared train/eval setup: corpus, samples, splits, model config."""
    cfg = load_config(args.config, args.set or ())
    run = run_settings(cfg)
    seed = args.seed if args.seed is not None else run["seed"]
    data = getattr(args, "data", None) or run["data"]
    if not data:
        raise ValidationError("this command needs a corpus directory ([run] data or --data)")
    sequences, tracks, taxonomy = an.load_corpus(data)
    toggles = parse_ablation(getattr(args, "ablation", None))
    mcfg = model_config(cfg, taxonomy.num_phases)
    if "stfeat" in toggles:
        mcfg = md.ModelConfig.from_dict(
            dict(mcfg.to_dict(), refiner_enabled=toggles["stfeat"]))
    if "spi" in toggles:
        mcfg = md.ModelConfig.from_dict(
            dict(mcfg.to_dict(), spi_head=toggles["spi"]))
    plan = split_plan(cfg)
    by_id = {t.video_id: t for t in tracks}
    folds = []
    seq_by_id = {s.video_id: s for s in sequences}
    for split in an.make_splits([t.video_id for t in tracks], plan):
        train_tracks = [by_id[v] for v in split.train_ids]
        if mcfg.spi_head:
            table = _train_table(train_tracks, taxonomy, run["spi_mode"])
            samples = tr.make_samples(sequences, tracks, table, mode=run["spi_mode"])
        else:
            samples = [tr.VideoSample(seq_by_id[t.video_id], t, None) for t in tracks]
        sample_by_id = {s.features.video_id: s for s in samples}
        folds.append((
            [sample_by_id[v] for v in split.train_ids],
            [sample_by_id[v] for v in split.eval_ids],
        ))
    return cfg, run, seed, taxonomy, mcfg, folds


def cmd_train(args):
    cfg, run, seed, taxonomy, mcfg, folds = _prepare_run(args)
    out = args.out or run["out"]
    if not out:
        raise ValidationError("train needs an output directory ([run] out or --out)")
    lcfg = loss_config(cfg, mcfg.spi_head)
    ocfg = optim_config(cfg)
    os.makedirs(out, exist_ok=True)
    write_resolved(os.path.join(out, "resolved.ini"), cfg, seed)
    code = 0
    for i, (train_s, eval_s) in enumerate(folds):
        fold_dir = out if len(folds) == 1 else os.path.join(out, f"fold{i}")
        os.makedirs(fold_dir, exist_ok=True)
        model = md.build(mcfg, seed=seed)
        result = tr.fit(
            model, train_s, eval_s, lcfg, ocfg, seed=seed,
            log_path=os.path.join(fold_dir, "log.csv"),
            checkpoint_path=os.path.join(fold_dir, "best.ckpt"),
        )
        md.save_checkpoint(os.path.join(fold_dir, "final.ckpt"), result.model)
        report = ev.evaluate_model(result.model, eval_s, mode="pooled",
                                   names=taxonomy.names)
        ev.write_report(os.path.join(fold_dir, "report.csv"), report)
        last = result.history[-1]
        print(f"fold {i}: best acc {result.best_accuracy:.4f} @epoch {result.best_epoch}, "
              f"final acc {last.eval_acc:.4f}, {result.seconds:.1f}s -> {fold_dir}")
    return code


def cmd_eval(args):
    _, run, _, taxonomy, _, folds = _prepare_run(args)
    if args.fold >= len(folds):
        raise ValidationError(f"fold {args.fold} out of range ({len(folds)} folds)")
    model = md.load_checkpoint(args.checkpoint)
    if model.config.num_phases != taxonomy.num_phases:
        raise ValidationError(
            f"checkpoint has {model.config.num_phases} phases, corpus has "
            f"{taxonomy.num_phases}")
    _, eval_s = folds[args.fold]
    report = ev.evaluate_model(model, eval_s, mode=args.mode, names=taxonomy.names)
    print(ev.render_report(report))
    if args.out:
        ev.write_report(args.out, report)
        print(f"wrote {args.out}")
    if args.ribbon:
        sample = next((s for s in eval_s if s.features.video_id == args.ribbon), None)
        if sample is None:
            raise ValidationError(f"video {args.ribbon!r} is not in the eval fold")
        preds = md.predict_video(model, sample.features)
        import numpy as np
        pred = np.array([p.phase for p in preds], dtype=np.int64)
        spi_pred = (np.array([p.spi for p in preds], dtype=np.float64)
                    if model.config.spi_head else None)
        base = os.path.join(os.path.dirname(args.out) if args.out else ".",
                            f"ribbon_{args.ribbon}")
        ev.ribbon_export(sample.track.labels, pred, taxonomy.names,
                         base + ".svg", base + ".csv",
                         spi_pred=spi_pred, spi_target=sample.spi,
                         video_id=args.ribbon)
        print(f"wrote {base}.svg and {base}.csv")
    return 0


def cmd_predict(args):
    model = md.load_checkpoint(args.checkpoint)
    seq = read_features(args.features)
    names = None
    if args.taxonomy:
        taxonomy = md.PhaseTaxonomy.from_file(args.taxonomy)
        if taxonomy.num_phases != model.config.num_phases:
            raise ValidationError(
                f"taxonomy has {taxonomy.num_phases} phases, checkpoint has "
                f"{model.config.num_phases}")
        names = taxonomy.names
    preds = md.predict_video(model, seq)
    lines = ["t,phase,spi"]
    for p in preds:
        label = names[p.phase] if names else str(p.phase)
        spi_txt = "" if p.spi is None else repr(float(p.spi))
        lines.append(f"{p.t},{label},{spi_txt}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {len(preds)} predictions to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# entry point

def build_parser():
    parser = argparse.ArgumentParser(
        prog="phaserec",
        description="Surgical phase recognition: corpora, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="summarize an annotation corpus")
    p.add_argument("--annotations", required=True, help="directory with annotation CSVs and taxonomy.txt")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("spi-table", help="derive progress-transition boundaries")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", help="write the table as CSV here")
    p.set_defaults(func=cmd_spi_table)

    def common(p, data=False):
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value")
        if data:
            p.add_argument("--data", help="override [run] data corpus directory")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--out", help="override [run] out directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a corpus split")
    common(p, data=True)
    p.add_argument("--out", help="override [run] out directory")
    p.add_argument("--ablation", metavar="spi=off,stfeat=off",
                   help="toggle the progress head and temporal refinement")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the eval fold")
    common(p, data=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("pooled", "per-video"), default="pooled")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", help="write the report CSV here")
    p.add_argument("--ribbon", metavar="VIDEO_ID",
                   help="also export a truth/prediction ribbon for this eval video")
    p.add_argument("--ablation", metavar="spi=off,stfeat=off",
                   help="evaluate under the same toggles used in training")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict phases for one feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="a .prfv feature file")
    p.add_argument("--taxonomy", help="taxonomy.txt for phase names")
    p.add_argument("--out", help="write predictions CSV here")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
