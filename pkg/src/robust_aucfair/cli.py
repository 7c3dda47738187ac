"""Command-line entry point: ``robust-aucfair <command> [options]``.

Commands
    train            one run; writes checkpoint.bin, history.jsonl, report.json
    sweep            noise levels x modes x repetitions; writes summary.csv
    evaluate         score a checkpoint on the test split of a config
    estimate-gamma   gamma matrix from a similarity file
    export-frontier  average summary files into plot-ready points

Exit codes: 0 success, 2 bad configuration or input, 3 some sweep runs
failed, 4 a training invariant was violated.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import scorer
from .aucfair import group_auc_report
from .dataset import (Dataset, Schema, apply_standardizer, fit_standardizer, inject_group_noise,
                      load_tabular, make_synthetic, split)
from .dro import GammaMatrix, estimate_gamma, read_similarity_file
from .errors import InvariantViolation, ParseError, SchemaError
from .trainer import MODES, TrainConfig, train, write_history

log = logging.getLogger("robust_aucfair")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_INVARIANT = 0, 2, 3, 4
SUMMARY_COLUMNS = ["noise", "mode", "rep", "auc", "violation", "min_max"]
METRICS = ("auc", "violation", "min_max")
NOISE_SPLITS = ("train", "val", "test")

# Synthetic presets. "adult" and "default" mimic the group balance and the
# per-group base rates of the two socioeconomic tables; "gap" is a small
# dataset with a wide group-level AUC spread.
SYNTHETIC_PRESETS = {
    "gap": dict(n=2000, gap=1.0, group_ratio=0.5, pos_rate=0.3, d=6),
    "adult": dict(n=8000, gap=0.5, group_ratio=0.33, pos_rate=(0.11, 0.31), d=8),
    "default": dict(n=8000, gap=0.0, group_ratio=0.6, pos_rate=(0.15, 0.3), d=8),
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class DataConfig:
    path: str | None = None
    schema: dict | None = None
    synthetic: dict | None = None
    subsample: int | None = None


@dataclass
class SplitConfig:
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int | None = None


@dataclass
class NoiseConfig:
    levels: list[float] = field(default_factory=lambda: [0.0])
    seed: int | None = None
    splits: list[str] = field(default_factory=lambda: ["train"])


@dataclass
class ExperimentConfig:
    """Parsed experiment file.

    ``seed`` is the base seed; repetition ``r`` runs with ``seed + r`` for the
    subsample, split, noise and training streams unless ``split.seed`` or
    ``noise.seed`` pin them. ``gamma`` in ``train`` may be a number, the
    string ``"noise"`` (use the injected noise level) or a path to a JSON
    matrix written by ``estimate-gamma``.
    """

    data: DataConfig
    split: SplitConfig = field(default_factory=SplitConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    train: dict = field(default_factory=dict)
    modes: list[str] = field(default_factory=lambda: ["robust"])
    repetitions: int = 1
    seed: int = 0
    out_dir: str = "runs"
    schema_version: int = SCHEMA_VERSION
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a mapping")
        version = raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
        top = {f.name for f in fields(cls)} - {"base_dir"}
        _reject_unknown(raw, top, "config")
        if "data" not in raw:
            raise ConfigError("data: missing")
        data = _sub(DataConfig, raw["data"], "data")
        spl = _sub(SplitConfig, raw.get("split", {}), "split")
        noise = _sub(NoiseConfig, raw.get("noise", {}), "noise")
        spl.ratios = tuple(float(r) for r in spl.ratios)
        noise.levels = [float(v) for v in noise.levels]
        noise.splits = list(noise.splits)
        cfg = cls(data=data, split=spl, noise=noise,
                  train=dict(raw.get("train") or {}),
                  modes=list(raw.get("modes", ["robust"])),
                  repetitions=raw.get("repetitions", 1),
                  seed=raw.get("seed", 0),
                  out_dir=str(raw.get("out_dir", "runs")),
                  base_dir=Path(base_dir))
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "data": asdict(self.data),
            "split": {"ratios": list(self.split.ratios), "seed": self.split.seed},
            "noise": asdict(self.noise),
            "train": dict(self.train),
            "modes": list(self.modes),
            "repetitions": self.repetitions,
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    def validate(self) -> None:
        d = self.data
        if (d.path is None) == (d.synthetic is None):
            raise ConfigError("data: give exactly one of 'path' or 'synthetic'")
        if d.path is not None:
            if not isinstance(d.schema, dict):
                raise ConfigError("data.schema: required with data.path")
            try:
                Schema.from_dict(d.schema)
            except (SchemaError, TypeError) as exc:
                raise ConfigError(f"data.schema: {exc}") from None
        else:
            if not isinstance(d.synthetic, dict):
                raise ConfigError("data.synthetic: must be a mapping")
            preset = d.synthetic.get("preset", "gap")
            if preset not in SYNTHETIC_PRESETS:
                raise ConfigError(f"data.synthetic.preset: unknown preset {preset!r}")
            allowed = {"preset", *SYNTHETIC_PRESETS["gap"]}
            _reject_unknown(d.synthetic, allowed, "data.synthetic")
        if d.subsample is not None and (not isinstance(d.subsample, int) or d.subsample < 2):
            raise ConfigError("data.subsample: must be an integer >= 2")
        r = self.split.ratios
        if len(r) != 3 or any(x <= 0 for x in r) or not math.isclose(sum(r), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split.ratios: need three positive numbers summing to 1, got {list(r)}")
        if not self.noise.levels:
            raise ConfigError("noise.levels: must list at least one level")
        for v in self.noise.levels:
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"noise.levels: {v} is outside [0, 1]")
        for s in self.noise.splits:
            if s not in NOISE_SPLITS:
                raise ConfigError(f"noise.splits: unknown split {s!r}")
        if not self.modes:
            raise ConfigError("modes: must list at least one mode")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"modes: unknown mode {m!r} (choose from {', '.join(MODES)})")
        if not isinstance(self.repetitions, int) or self.repetitions < 1:
            raise ConfigError("repetitions: must be an integer >= 1")
        if not isinstance(self.seed, int):
            raise ConfigError("seed: must be an integer")
        known = {f.name for f in fields(TrainConfig)} - {"mode", "seed"}
        _reject_unknown(self.train, known, "train")
        try:
            self.train_config("robust", 0.0, 0)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from None

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def gamma_for(self, noise: float) -> float | GammaMatrix:
        g = self.train.get("gamma", "noise")
        if g == "noise":
            return float(noise)
        if isinstance(g, str):
            return GammaMatrix(json.loads(self.resolve(g).read_text())["gamma"])
        return float(g)

    def train_config(self, mode: str, noise: float, seed: int) -> TrainConfig:
        opts = {k: v for k, v in self.train.items() if k != "gamma"}
        if "hidden" in opts:
            opts["hidden"] = tuple(opts["hidden"])
        return TrainConfig(mode=mode, seed=seed, gamma=self.gamma_for(noise), **opts)


def _reject_unknown(raw: dict, allowed: set, where: str) -> None:
    extra = sorted(set(raw) - set(allowed))
    if extra:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(map(str, extra))}")


def _sub(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: must be a mapping")
    _reject_unknown(raw, {f.name for f in fields(cls)}, where)
    return cls(**raw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: invalid YAML: {exc}") from None
    return ExperimentConfig.from_dict(raw, base_dir=path.parent)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


# -- data preparation ---------------------------------------------------------

def load_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    d = cfg.data
    if d.synthetic is not None:
        opts = dict(SYNTHETIC_PRESETS[d.synthetic.get("preset", "gap")])
        opts.update({k: v for k, v in d.synthetic.items() if k != "preset"})
        ds = make_synthetic(seed=seed, **opts)
    else:
        ds = load_tabular(cfg.resolve(d.path), Schema.from_dict(d.schema), standardize=False)
    if d.subsample is not None and d.subsample < len(ds):
        rng = np.random.default_rng([seed, 2])
        ds = ds.subset(np.sort(rng.choice(len(ds), d.subsample, replace=False)))
    return ds


def prepare_splits(cfg: ExperimentConfig, noise: float, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Load, split, standardize on the training rows, then inject noise."""
    ds = load_dataset(cfg, seed)
    split_seed = cfg.split.seed if cfg.split.seed is not None else seed
    parts = list(split(ds, cfg.split.ratios, split_seed))
    st = fit_standardizer(parts[0])
    for p in parts:
        apply_standardizer(p, st)
    noise_seed = cfg.noise.seed if cfg.noise.seed is not None else seed
    for k, name in enumerate(NOISE_SPLITS):
        if name in cfg.noise.splits and noise > 0:
            parts[k] = inject_group_noise(parts[k], noise, [noise_seed, k])
    return tuple(parts)


def test_report(params, test: Dataset) -> dict:
    scores = scorer.forward(params, test.features)
    report = group_auc_report(scores, test.labels, test.eval_groups, test.num_groups)
    return report.to_dict()


# -- commands -----------------------------------------------------------------

@dataclass
class RunOutcome:
    report: dict
    best_epoch: int | None


def run_once(cfg: ExperimentConfig, mode: str, noise: float, seed: int, out: Path | None) -> RunOutcome:
    tr, va, te = prepare_splits(cfg, noise, seed)
    result = train(tr, va, cfg.train_config(mode, noise, seed))
    report = test_report(result.params, te)
    report["best_epoch"] = result.best_epoch
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        scorer.save_checkpoint(out / "checkpoint.bin", result.params)
        write_history(out / "history.jsonl", result.history)
        (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return RunOutcome(report, result.best_epoch)


def cmd_train(cfg: ExperimentConfig, args) -> int:
    mode = cfg.modes[0]
    noise = cfg.noise.levels[0]
    out = Path(cfg.out_dir)
    outcome = run_once(cfg, mode, noise, cfg.seed, out)
    r = outcome.report
    print(f"{mode} noise={noise:g} seed={cfg.seed}: auc={r['overall_auc']:.4f} "
          f"violation={r['violation']:.4f} min_max={r['min_max']:.4f} -> {out}")
    return EXIT_OK


def aggregate_rows(rows: list[dict]) -> list[dict]:
    """One ``mean±std`` row per (noise, mode), sample standard deviation."""
    out = []
    keys = sorted({(r["noise"], r["mode"]) for r in rows}, key=lambda k: (k[0], MODES.index(k[1])))
    for noise, mode in keys:
        group = [r for r in rows if r["noise"] == noise and r["mode"] == mode]
        agg = {"noise": noise, "mode": mode, "rep": "mean±std"}
        for m in METRICS:
            v = np.array([r[m] for r in group], dtype=np.float64)
            sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
            agg[m] = f"{v.mean():.4f}±{sd:.4f}"
        out.append(agg)
    return out


def write_summary(path, rows: list[dict]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(k, r[k]) for k in SUMMARY_COLUMNS})
        for r in aggregate_rows(rows):
            w.writerow({**r, "noise": _fmt("noise", r["noise"])})


def _fmt(key: str, v):
    if key == "noise":
        return f"{v:g}"
    return f"{v:.6f}" if isinstance(v, float) else v


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, failed, invariant = [], 0, False
    for noise in cfg.noise.levels:
        for mode in cfg.modes:
            for rep in range(cfg.repetitions):
                seed = cfg.seed + rep
                run_dir = out / f"noise{noise:g}_{mode}_rep{rep}"
                try:
                    r = run_once(cfg, mode, noise, seed, run_dir).report
                except InvariantViolation as exc:
                    log.error("noise=%g mode=%s rep=%d: invariant violated: %s", noise, mode, rep, exc)
                    failed += 1
                    invariant = True
                    continue
                except (ValueError, FloatingPointError) as exc:
                    log.error("noise=%g mode=%s rep=%d failed: %s", noise, mode, rep, exc)
                    failed += 1
                    continue
                rows.append({"noise": noise, "mode": mode, "rep": rep, "auc": r["overall_auc"],
                             "violation": r["violation"], "min_max": r["min_max"]})
                print(f"noise={noise:g} mode={mode} rep={rep}: auc={r['overall_auc']:.4f} "
                      f"violation={r['violation']:.4f} min_max={r['min_max']:.4f}")
    write_summary(out / "summary.csv", rows)
    print(f"summary -> {out / 'summary.csv'}")
    if invariant:
        return EXIT_INVARIANT
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    if args.checkpoint is None:
        raise ConfigError("--checkpoint: required for evaluate")
    params = scorer.load_checkpoint(args.checkpoint)
    _, _, te = prepare_splits(cfg, cfg.noise.levels[0], cfg.seed)
    report = test_report(params, te)
    text = json.dumps(report, indent=2)
    if args.output:
        Path(args.output).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_estimate_gamma(args) -> int:
    records = read_similarity_file(args.similarity)
    m = args.groups or max(r.group for r in records)
    gamma = estimate_gamma(records, m)
    text = gamma.to_json()
    if args.output:
        Path(args.output).write_text(text + "\n")
    print(text)
    return EXIT_OK


def read_summary_rows(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(SUMMARY_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ParseError(f"{path}: missing columns {sorted(missing)}", row=1)
        rows = []
        for i, r in enumerate(reader, start=2):
            if r["rep"] == "mean±std":
                continue
            try:
                rows.append({"noise": float(r["noise"]), "mode": r["mode"],
                             **{m: float(r[m]) for m in METRICS}})
            except ValueError:
                raise ParseError(f"{path}: non-numeric metric", row=i) from None
    return rows


def frontier_points(paths) -> list[dict]:
    """Per (mode, noise): average within each file, then across files."""
    per_file = []
    for p in paths:
        rows = read_summary_rows(p)
        means = {}
        for key in {(r["mode"], r["noise"]) for r in rows}:
            group = [r for r in rows if (r["mode"], r["noise"]) == key]
            means[key] = {m: float(np.mean([r[m] for r in group])) for m in METRICS}
        per_file.append(means)
    keys = sorted({k for f in per_file for k in f})
    points = []
    for mode, noise in keys:
        vals = [f[(mode, noise)] for f in per_file if (mode, noise) in f]
        points.append({"mode": mode, "noise": noise,
                       **{f"mean_{m}": float(np.mean([v[m] for v in vals])) for m in METRICS},
                       "sources": len(vals)})
    if not points:
        raise ValueError("no summary rows found in the given files")
    return points


def cmd_export_frontier(args) -> int:
    points = frontier_points(args.summaries)
    cols = ["mode", "noise", "mean_auc", "mean_violation", "mean_min_max", "sources"]
    fh = Path(args.output).open("w", newline="", encoding="utf-8") if args.output else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for p in points:
            w.writerow({k: _fmt(k, v) for k, v in p.items()})
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


# -- argument handling --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robust-aucfair", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def experiment(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="YAML experiment file")
        p.add_argument("--mode", choices=MODES, help="run only this mode")
        p.add_argument("--noise-level", type=float, help="run only this noise level")
        p.add_argument("--noise-seed", type=int)
        p.add_argument("--gamma", help="TV radius: a number, 'noise', or a gamma JSON file")
        p.add_argument("--seed", type=int, help="base seed")
        p.add_argument("--out-dir")
        return p

    experiment("train", "train one model")
    experiment("sweep", "noise x mode x repetition sweep")
    ev = experiment("evaluate", "evaluate a checkpoint on the test split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--output", help="also write the report here")

    eg = sub.add_parser("estimate-gamma", help="gamma matrix from a similarity file")
    eg.add_argument("similarity", help="CSV with columns id,label,group,sim_pos,sim_neg")
    eg.add_argument("--groups", type=int, help="number of groups (default: largest group id)")
    eg.add_argument("--output")

    ef = sub.add_parser("export-frontier", help="plot data from sweep summaries")
    ef.add_argument("summaries", nargs="+", help="summary.csv files, one per dataset")
    ef.add_argument("--output", help="CSV path (default: stdout)")
    return ap


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.mode:
        cfg.modes = [args.mode]
    if args.noise_level is not None:
        cfg.noise.levels = [args.noise_level]
    if args.noise_seed is not None:
        cfg.noise.seed = args.noise_seed
    if args.gamma is not None:
        try:
            cfg.train["gamma"] = float(args.gamma)
        except ValueError:
            cfg.train["gamma"] = args.gamma
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir:
        cfg.out_dir = args.out_dir
    cfg.validate()
    return cfg


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "estimate-gamma":
            return cmd_estimate_gamma(args)
        if args.command == "export-frontier":
            return cmd_export_frontier(args)
        cfg = apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except InvariantViolation as exc:
        print(f"error: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, SchemaError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
