"""Command-line surface: synth, tapt, run, sweep, ablate.

Every option can also come from a JSON config file (flag > file > default);
unknown config keys are rejected before any compute. Each command writes a
run manifest next to its output before training starts and finalizes it on
success, so interrupted runs are detectable. Exit codes: 0 success, 1 runtime
failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone

from . import __version__
from .acquisition import STRATEGIES, AcquisitionSpec
from .dataset import (
    Dataset,
    ParseError,
    SplitSpec,
    SynthConfig,
    load_dataset,
    synth_pool,
    write_dataset,
)
from .engine import (
    ALConfig,
    ConfigError,
    PipelineConfig,
    ablation_grid,
    format_runlog_csv,
    run_cells,
    run_pipeline,
)
from .tapt import TaptConfig, TrainingDiverged, load_encoder, save_encoder


def _atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


class Manifest:
    """Config echo + timestamps + output paths, written before any compute."""

    def __init__(self, command: str, run_id: str, options: dict, out_path: str):
        self.path = f"{out_path}.manifest.json"
        self.payload = {
            "run_id": run_id,
            "command": command,
            "code_version": __version__,
            "config": {k: v for k, v in sorted(options.items())},
            "started_at": _now_iso(),
            "finalized": False,
            "outputs": [],
            "wallclock_ms": {},
        }
        self.write()

    def write(self) -> None:
        _atomic_write(self.path, json.dumps(self.payload, indent=2) + "\n")

    def finalize(self, outputs: list[str], wallclock: dict | None = None) -> None:
        self.payload["outputs"] = outputs
        self.payload["finished_at"] = _now_iso()
        self.payload["finalized"] = True
        if wallclock:
            self.payload["wallclock_ms"] = wallclock
        self.write()


def _parse_seeds(text: str) -> list[int]:
    text = str(text).strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",") if v != ""]


def _parse_budgets(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v != ""]


# per-command defaults; config-file keys must come from these dicts
_SYNTH_DEFAULTS = {
    "classes": 4,
    "dim": 32,
    "per_class": 500,
    "sep": 2.5,
    "noise": 0.10,
    "seed": 0,
    "out": "pool.ndjson",
}

_TAPT_DEFAULTS = {
    "data": None,
    "epochs": 30,
    "batch_size": 32,
    "lr": 1e-4,
    "frames": 8,
    "code_dim": 16,
    "codebook_size": 32,
    "hidden": 64,
    "mask_fraction": 0.15,
    "temperature": 0.1,
    "seed": 0,
    "out": "encoder.json",
}

_TRAIN_DEFAULTS = {
    "data": None,
    "acq": "entropy",
    "init": "cluster",
    "budget": 0.20,
    "k": None,
    "init_fraction": 0.01,
    "ft_epochs": 20,
    "patience": 5,
    "batch_size": 32,
    "lr": 1e-4,
    "k_max": 8,
    "committee_size": 10,
    "dropout_rate": 0.1,
    "no_warm_start": False,
    "tapt_epochs": 30,
    "tapt_lr": 1e-4,
    "frames": 8,
    "code_dim": 16,
    "codebook_size": 32,
    "hidden": 64,
    "mask_fraction": 0.15,
    "temperature": 0.1,
    "folds": 5,
    "fold": 0,
    "val_fraction": 0.10,
    "no_tapt": False,
    "jobs": 1,
}

_RUN_DEFAULTS = {
    **_TRAIN_DEFAULTS,
    "budget": 0.20,
    "encoder": None,
    "seed": 0,
    "out": "runlog.csv",
}
_SWEEP_DEFAULTS = {
    **_TRAIN_DEFAULTS,
    "budgets": "0.1,0.2,0.4,0.6,0.8,1.0",
    "seeds": "0,1,2",
    "no_baseline": False,
    "out": "sweep.csv",
}
_ABLATE_DEFAULTS = {
    **_TRAIN_DEFAULTS,
    "budgets": "0.1,0.2,0.4,0.6,0.8,1.0",
    "seeds": "0,1,2",
    "out": "grid.csv",
}


def _merge_options(args: argparse.Namespace, defaults: dict) -> dict:
    given = {k: v for k, v in vars(args).items() if k not in ("func", "command")}
    file_cfg = {}
    config_path = given.pop("config", None)
    if config_path is not None:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc}")
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return {**defaults, **file_cfg, **given}


def _al_config(opts: dict, seed: int) -> ALConfig:
    cfg = ALConfig(
        init_fraction=float(opts["init_fraction"]),
        k=None if opts["k"] is None else int(opts["k"]),
        budget=float(opts["budget"]) if "budget" in opts else 0.20,
        acquisition=AcquisitionSpec(
            kind=opts["acq"],
            committee_size=int(opts["committee_size"]),
            dropout_rate=float(opts["dropout_rate"]),
        ),
        init=opts["init"],
        warm_start=not opts["no_warm_start"],
        epochs=int(opts["ft_epochs"]),
        patience=int(opts["patience"]),
        batch_size=int(opts["batch_size"]),
        lr=float(opts["lr"]),
        k_max=int(opts["k_max"]),
        seed=seed,
    )
    cfg.validate()
    return cfg


def _tapt_config(opts: dict, seed: int) -> TaptConfig:
    cfg = TaptConfig(
        frames=int(opts["frames"]),
        code_dim=int(opts["code_dim"]),
        codebook_size=int(opts["codebook_size"]),
        hidden=int(opts["hidden"]),
        mask_fraction=float(opts["mask_fraction"]),
        temperature=float(opts["temperature"]),
        epochs=int(opts["tapt_epochs"]),
        batch_size=int(opts["batch_size"]),
        lr=float(opts["tapt_lr"]),
        seed=seed,
    )
    cfg.validate()
    return cfg


def _split_spec(opts: dict, seed: int) -> SplitSpec:
    spec = SplitSpec(
        fold_count=int(opts["folds"]),
        fold_index=int(opts["fold"]),
        val_fraction=float(opts["val_fraction"]),
        seed=seed,
    )
    spec.validate()
    return spec


def _load_data(opts: dict) -> Dataset:
    if not opts.get("data"):
        raise ConfigError("--data is required")
    return load_dataset(opts["data"])


def cmd_synth(opts: dict) -> int:
    cfg = SynthConfig(
        classes=int(opts["classes"]),
        dim=int(opts["dim"]),
        per_class=int(opts["per_class"]),
        separation=float(opts["sep"]),
        noise_rate=float(opts["noise"]),
        seed=int(opts["seed"]),
    )
    cfg.validate()
    out = opts["out"]
    manifest = Manifest("synth", f"synth-s{cfg.seed}", opts, out)
    data, truth = synth_pool(cfg)
    write_dataset(data, out, "ndjson")
    truth_path = f"{out}.truth.json"
    _atomic_write(truth_path, json.dumps(truth.to_json()) + "\n")
    manifest.finalize([out, truth_path])
    print(f"wrote {len(data)} samples to {out}")
    return 0


def cmd_tapt(opts: dict) -> int:
    from .dataset import Sample, zscore_normalize
    from .tapt import EncoderModel, tapt_train

    seed = int(opts["seed"])
    data = _load_data(opts)
    cfg = TaptConfig(
        frames=int(opts["frames"]),
        code_dim=int(opts["code_dim"]),
        codebook_size=int(opts["codebook_size"]),
        hidden=int(opts["hidden"]),
        mask_fraction=float(opts["mask_fraction"]),
        temperature=float(opts["temperature"]),
        epochs=int(opts["epochs"]),
        batch_size=int(opts["batch_size"]),
        lr=float(opts["lr"]),
        seed=seed,
    )
    cfg.validate()
    out = opts["out"]
    manifest = Manifest("tapt", f"tapt-s{seed}", opts, out)
    # labels may be present in the file; strip them so pre-training never sees one
    pool = data.replace_samples(
        [Sample(s.id, s.features, None) for s in data.samples]
    )
    pool, _ = zscore_normalize(pool)
    encoder = EncoderModel.create(pool.feature_dim, cfg, seed=seed)
    t0 = time.perf_counter()
    encoder, trace = tapt_train(encoder, pool, cfg)
    wall = (time.perf_counter() - t0) * 1000.0
    save_encoder(encoder, cfg, out)
    losses_path = f"{out}.losses.csv"
    lines = ["epoch,loss"] + [f"{i},{repr(v)}" for i, v in enumerate(trace)]
    _atomic_write(losses_path, "\n".join(lines) + "\n")
    manifest.finalize([out, losses_path], {"tapt_ms": wall})
    print(f"wrote encoder checkpoint to {out} ({len(trace)} epochs)")
    return 0


def cmd_run(opts: dict) -> int:
    seed = int(opts["seed"])
    al = _al_config(opts, seed)
    tapt_cfg = _tapt_config(opts, seed)
    split = _split_spec(opts, seed)
    data = _load_data(opts)
    out = opts["out"]
    use_tapt = not opts["no_tapt"] and opts["encoder"] is None
    pretrain = "tapt_ft" if (use_tapt or opts["encoder"]) else "ft"
    run_id = f"{al.acquisition.kind}-{pretrain}-b{al.budget:g}-s{seed}"
    manifest = Manifest("run", run_id, opts, out)
    encoder = None
    if opts["encoder"]:
        encoder, _ = load_encoder(opts["encoder"])
    pcfg = PipelineConfig(
        al=al, tapt=tapt_cfg, use_tapt=use_tapt, split=split, run_id=run_id
    )
    res = run_pipeline(data, pcfg, encoder=encoder)
    _atomic_write(out, format_runlog_csv([res.runlog]))
    manifest.finalize(
        [out], {"tapt_ms": res.tapt_wall_ms, "al_ms": res.al_wall_ms}
    )
    final = res.runlog.final
    print(
        f"run {run_id}: labeled {final.labeled_count} "
        f"({final.labeled_fraction:.3f}), UA {final.ua:.4f}, WA {final.wa:.4f}"
    )
    return 0


SWEEP_HEADER = (
    "run_id,strategy,pretrain,budget,seed,fold,labeled_count,"
    "labeled_fraction,ua,wa,elapsed_ms"
)


def cmd_sweep(opts: dict) -> int:
    seeds = _parse_seeds(opts["seeds"])
    budgets = _parse_budgets(opts["budgets"])
    if not budgets or not all(0.0 < b <= 1.0 for b in budgets):
        raise ConfigError("budgets must lie in (0, 1]")
    base_al = _al_config({**opts, "budget": budgets[0]}, seeds[0])
    base_tapt = _tapt_config(opts, seeds[0])
    split = _split_spec(opts, seeds[0])
    data = _load_data(opts)
    out = opts["out"]
    manifest = Manifest("sweep", "sweep", opts, out)
    use_tapt = not opts["no_tapt"]
    strategies = [opts["acq"]]
    if not opts["no_baseline"] and "random" not in strategies:
        strategies.append("random")
    cells = [(s, use_tapt) for s in strategies]
    t0 = time.perf_counter()
    runs = run_cells(
        data, base_al, base_tapt, split, seeds, budgets, cells, jobs=int(opts["jobs"])
    )
    wall = (time.perf_counter() - t0) * 1000.0
    lines = [SWEEP_HEADER]
    for (sampling, pretrain, budget, seed), log in runs:
        r = log.final
        lines.append(
            ",".join(
                [
                    log.run_id,
                    sampling,
                    pretrain,
                    repr(budget),
                    str(seed),
                    str(log.fold),
                    str(r.labeled_count),
                    repr(r.labeled_fraction),
                    repr(r.ua),
                    repr(r.wa),
                    repr(r.elapsed_ms),
                ]
            )
        )
    _atomic_write(out, "\n".join(lines) + "\n")
    manifest.finalize([out], {"total_ms": wall})
    print(f"wrote {len(runs)} sweep rows to {out}")
    return 0


GRID_HEADER = "sampling,pretrain,budget,mean_ua,sd_ua,mean_wa,sd_wa,n_seeds"


def cmd_ablate(opts: dict) -> int:
    seeds = _parse_seeds(opts["seeds"])
    budgets = _parse_budgets(opts["budgets"])
    if not budgets or not all(0.0 < b <= 1.0 for b in budgets):
        raise ConfigError("budgets must lie in (0, 1]")
    base_al = _al_config({**opts, "budget": budgets[0]}, seeds[0])
    base_tapt = _tapt_config(opts, seeds[0])
    split = _split_spec(opts, seeds[0])
    data = _load_data(opts)
    out = opts["out"]
    manifest = Manifest("ablate", "ablate", opts, out)
    t0 = time.perf_counter()
    grid = ablation_grid(
        data,
        budgets,
        seeds,
        base_al,
        base_tapt,
        split=split,
        jobs=int(opts["jobs"]),
    )
    wall = (time.perf_counter() - t0) * 1000.0
    lines = [GRID_HEADER]
    for row in grid.summary:
        lines.append(
            ",".join(
                [
                    row["sampling"],
                    row["pretrain"],
                    repr(row["budget"]),
                    repr(row["mean_ua"]),
                    repr(row["sd_ua"]),
                    repr(row["mean_wa"]),
                    repr(row["sd_wa"]),
                    str(row["n_seeds"]),
                ]
            )
        )
    _atomic_write(out, "\n".join(lines) + "\n")
    runs_path = f"{out}.runs.csv"
    _atomic_write(runs_path, format_runlog_csv([log for _, log in grid.runs]))
    manifest.finalize([out, runs_path], {"total_ms": wall})
    print(f"wrote {len(grid.summary)} summary rows to {out}")
    return 0


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    s = argparse.SUPPRESS
    p.add_argument("--data", default=s)
    p.add_argument("--acq", choices=STRATEGIES, default=s)
    p.add_argument("--init", choices=("cluster", "random"), default=s)
    p.add_argument("--budget", type=float, default=s)
    p.add_argument("--k", type=int, default=s)
    p.add_argument("--init-fraction", type=float, dest="init_fraction", default=s)
    p.add_argument("--ft-epochs", type=int, dest="ft_epochs", default=s)
    p.add_argument("--patience", type=int, default=s)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=s)
    p.add_argument("--lr", type=float, default=s)
    p.add_argument("--k-max", type=int, dest="k_max", default=s)
    p.add_argument("--committee-size", type=int, dest="committee_size", default=s)
    p.add_argument("--dropout-rate", type=float, dest="dropout_rate", default=s)
    p.add_argument("--no-warm-start", action="store_true", dest="no_warm_start", default=s)
    p.add_argument("--tapt-epochs", type=int, dest="tapt_epochs", default=s)
    p.add_argument("--tapt-lr", type=float, dest="tapt_lr", default=s)
    p.add_argument("--frames", type=int, default=s)
    p.add_argument("--code-dim", type=int, dest="code_dim", default=s)
    p.add_argument("--codebook-size", type=int, dest="codebook_size", default=s)
    p.add_argument("--hidden", type=int, default=s)
    p.add_argument("--mask-fraction", type=float, dest="mask_fraction", default=s)
    p.add_argument("--temperature", type=float, default=s)
    p.add_argument("--folds", type=int, default=s)
    p.add_argument("--fold", type=int, default=s)
    p.add_argument("--val-fraction", type=float, dest="val_fraction", default=s)
    p.add_argument("--no-tapt", action="store_true", dest="no_tapt", default=s)
    p.add_argument("--jobs", type=int, default=s)
    p.add_argument("--out", default=s)
    p.add_argument("--config", default=s)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="altune",
        description="Pool-based active learning with task-adaptive pre-training.",
    )
    parser.add_argument("--version", action="version", version=f"altune {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    s = argparse.SUPPRESS

    p = sub.add_parser("synth", help="generate a synthetic labeled pool")
    p.add_argument("--classes", type=int, default=s)
    p.add_argument("--dim", type=int, default=s)
    p.add_argument("--per-class", type=int, dest="per_class", default=s)
    p.add_argument("--sep", type=float, default=s)
    p.add_argument("--noise", type=float, default=s)
    p.add_argument("--seed", type=int, default=s)
    p.add_argument("--out", default=s)
    p.add_argument("--config", default=s)
    p.set_defaults(func=cmd_synth, defaults=_SYNTH_DEFAULTS)

    p = sub.add_parser("tapt", help="pre-train an encoder on an unlabeled pool")
    p.add_argument("--data", default=s)
    p.add_argument("--epochs", type=int, default=s)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=s)
    p.add_argument("--lr", type=float, default=s)
    p.add_argument("--frames", type=int, default=s)
    p.add_argument("--code-dim", type=int, dest="code_dim", default=s)
    p.add_argument("--codebook-size", type=int, dest="codebook_size", default=s)
    p.add_argument("--hidden", type=int, default=s)
    p.add_argument("--mask-fraction", type=float, dest="mask_fraction", default=s)
    p.add_argument("--temperature", type=float, default=s)
    p.add_argument("--seed", type=int, default=s)
    p.add_argument("--out", default=s)
    p.add_argument("--config", default=s)
    p.set_defaults(func=cmd_tapt, defaults=_TAPT_DEFAULTS)

    p = sub.add_parser("run", help="one active-learning run")
    _add_train_flags(p)
    p.add_argument("--encoder", default=s)
    p.add_argument("--seed", type=int, default=s)
    p.set_defaults(func=cmd_run, defaults=_RUN_DEFAULTS)

    p = sub.add_parser("sweep", help="budget sweep over seeds and strategies")
    _add_train_flags(p)
    p.add_argument("--budgets", default=s)
    p.add_argument("--seeds", default=s)
    p.add_argument("--no-baseline", action="store_true", dest="no_baseline", default=s)
    p.set_defaults(func=cmd_sweep, defaults=_SWEEP_DEFAULTS)

    p = sub.add_parser("ablate", help="sampling x pre-training ablation grid")
    _add_train_flags(p)
    p.add_argument("--budgets", default=s)
    p.add_argument("--seeds", default=s)
    p.set_defaults(func=cmd_ablate, defaults=_ABLATE_DEFAULTS)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        opts = _merge_options(args, args.defaults)
        return args.func(opts)
    except (ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - unexpected runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
