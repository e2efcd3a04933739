"""Command-line entry point.

Subcommands::

    replaycl generate --config bench.json --out data/
    replaycl run      --config experiment.json [--out DIR] [--jobs N] [--seed-override S]
    replaycl ablation --config experiment.json --sweep percentile [--values 90 80 ...]
    replaycl infer    --checkpoint run.json --input rows.csv --out predictions.csv

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or
numerical failure. Logs go to stderr (level from ``REPLAYCL_LOG``), data
goes to files, stdout carries a short summary.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    BenchmarkSpec, MissionSpec, NormalizationState, PcaProjection, SplitDataset, TabularDataset,
    generate_benchmark, load_csv, normalize_apply, normalize_fit, pca_fit, pca_project, save_csv,
    smote_balance,
)
from .errors import FormatError, InvalidInput, ParseError, ReplayClError
from .nn import TrainConfig, checkpoint_dict, model_from_dict
from .replay import PreservationConfig
from .scenario import CSV_COLUMNS, ExperimentReport, Scenario, ScenarioConfig, StrategyId, run_scenario

log = logging.getLogger("replaycl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
MANIFEST_FORMAT = "replaycl-dataset"
RUN_CHECKPOINT_FORMAT = "replaycl-run"
FORMAT_VERSION = 1
SPLITS = ("train", "validation", "test")
SWEEPS = {
    "percentile": (90, 80, 70, 60, 50, 40, 30, 20, 10),
    "synthetic_fraction": (0.2, 0.4, 0.6, 0.8, 1.0),
}
_NON_FEATURE = ("label", "entity", "mission")


class ConfigError(InvalidInput):
    pass


def _strict(d, allowed: set[str], where: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} fields: {sorted(unknown)}")
    return d


# ---------------------------------------------------------------------- config


@dataclass(frozen=True)
class PreprocessConfig:
    normalize: bool = True
    pca_components: int | None = None
    pca_standardize: bool = True
    smote: bool = False
    smote_k: int = 5
    seed: int = 0

    @classmethod
    def from_json(cls, d: dict) -> "PreprocessConfig":
        _strict(d, {f.name for f in dataclasses.fields(cls)}, "preprocess")
        cfg = cls(**d)
        if cfg.pca_components is not None and cfg.pca_components < 1:
            raise ConfigError("preprocess.pca_components must be positive")
        if cfg.smote_k < 1:
            raise ConfigError("preprocess.smote_k must be positive")
        return cfg


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    strategies: tuple[str, ...]
    seeds: tuple[int, ...]
    output_dir: Path
    benchmark: BenchmarkSpec | None = None
    dataset_dir: Path | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    preservation: PreservationConfig = field(default_factory=PreservationConfig)
    c_max: int = 50
    h_max: float = 0.5
    synthetic_fraction: float = 1.0
    hidden: tuple[int, ...] = (256, 128, 128)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    @classmethod
    def from_json(cls, d: dict, base_dir: Path = Path(".")) -> "ExperimentConfig":
        _strict(d, {"scenario", "strategies", "seeds", "output_dir", "benchmark", "dataset_dir", "train",
                    "preservation", "sdg", "hidden", "preprocess"}, "config")
        for key in ("scenario", "strategies", "seeds", "output_dir"):
            if key not in d:
                raise ConfigError(f"config is missing {key!r}")
        try:
            scenario = Scenario(d["scenario"]).value
        except ValueError:
            raise ConfigError(f"scenario must be one of {[s.value for s in Scenario]}") from None
        strategies = d["strategies"]
        if not isinstance(strategies, list) or not strategies:
            raise ConfigError("strategies must be a non-empty list")
        for s in strategies:
            if s not in StrategyId._value2member_map_:
                raise ConfigError(f"unknown strategy {s!r}")
        seeds = d["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise ConfigError("seeds must be a non-empty list of non-negative integers")
        if ("benchmark" in d) == ("dataset_dir" in d):
            raise ConfigError("give exactly one of 'benchmark' and 'dataset_dir'")
        benchmark = dataset_dir = None
        if "benchmark" in d:
            b = d["benchmark"]
            if isinstance(b, str):
                b = _read_json(base_dir / b)
            benchmark = BenchmarkSpec.from_json(_strict(b, set(BenchmarkSpec.__dataclass_fields__), "benchmark"))
            if benchmark.scenario != scenario:
                raise ConfigError(f"benchmark scenario {benchmark.scenario!r} differs from {scenario!r}")
        else:
            dataset_dir = base_dir / d["dataset_dir"]
        train = _strict(d.get("train", {}), {"learning_rate", "momentum", "batch_size", "epochs"}, "train")
        pres = _strict(d.get("preservation", {}), {"percentile"}, "preservation")
        sdg = _strict(d.get("sdg", {}), {"c_max", "h_max", "synthetic_fraction"}, "sdg")
        hidden = d.get("hidden", [256, 128, 128])
        if not isinstance(hidden, list) or not hidden or not all(isinstance(h, int) and h > 0 for h in hidden):
            raise ConfigError("hidden must be a non-empty list of positive integers")
        cfg = cls(
            scenario=scenario, strategies=tuple(strategies), seeds=tuple(seeds),
            output_dir=base_dir / d["output_dir"], benchmark=benchmark, dataset_dir=dataset_dir,
            train=TrainConfig(**train), preservation=PreservationConfig(**pres),
            c_max=sdg.get("c_max", 50), h_max=sdg.get("h_max", 0.5),
            synthetic_fraction=sdg.get("synthetic_fraction", 1.0), hidden=tuple(hidden),
            preprocess=PreprocessConfig.from_json(d.get("preprocess", {})),
        )
        cfg.scenario_config(0)
        return cfg

    def scenario_config(self, seed: int) -> ScenarioConfig:
        train = dataclasses.replace(self.train, seed=seed)
        return ScenarioConfig(train, self.preservation, self.c_max, self.h_max,
                              self.synthetic_fraction, self.hidden).validate()

    def with_overrides(self, **changes) -> "ExperimentConfig":
        pres = self.preservation
        if "percentile" in changes:
            pres = PreservationConfig(changes.pop("percentile"))
        cfg = dataclasses.replace(self, preservation=pres, **changes)
        cfg.scenario_config(0)
        return cfg


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return ExperimentConfig.from_json(_read_json(path), path.parent)


# ---------------------------------------------------------------------- datasets


def write_dataset(missions, spec: BenchmarkSpec | None, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for mission, split in missions:
        files = {}
        for name in SPLITS:
            fname = f"mission{mission.mission_id + 1}_{name}.csv"
            save_csv(getattr(split, name), out_dir / fname)
            files[name] = {"path": fname, "sha256": _sha256(out_dir / fname)}
        entries.append({**mission.to_json(), "files": files,
                        "split_fractions": list(split.split_fractions)})
    manifest = {"format": MANIFEST_FORMAT, "version": FORMAT_VERSION,
                "benchmark": spec.to_json() if spec else None, "missions": entries}
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def read_dataset(dataset_dir) -> list[tuple[MissionSpec, SplitDataset]]:
    dataset_dir = Path(dataset_dir)
    manifest = _read_json(dataset_dir / "manifest.json")
    if manifest.get("format") != MANIFEST_FORMAT or manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{dataset_dir}/manifest.json is not a version {FORMAT_VERSION} dataset manifest")
    out = []
    for entry in manifest["missions"]:
        parts = [load_csv(dataset_dir / entry["files"][name]["path"]) for name in SPLITS]
        out.append((MissionSpec.from_json(entry), SplitDataset(*parts, tuple(entry["split_fractions"]))))
    return out


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(frozen=True)
class Preprocessor:
    """Transforms fitted on the first mission's training split."""

    normalization: NormalizationState | None
    pca: PcaProjection | None

    def transform(self, data: TabularDataset) -> TabularDataset:
        if self.normalization is not None:
            data = normalize_apply(self.normalization, data)
        if self.pca is not None:
            data = pca_project(self.pca, data)
        return data

    def transform_array(self, x: np.ndarray) -> np.ndarray:
        if self.normalization is not None:
            ds = TabularDataset(x, np.zeros(len(x), dtype=np.int64))
            x = normalize_apply(self.normalization, ds).features
        if self.pca is not None:
            x = self.pca.transform(x)
        return x

    @property
    def n_input(self) -> int | None:
        if self.normalization is not None:
            return len(self.normalization.minimum)
        return self.pca.n_input if self.pca is not None else None

    def to_json(self) -> dict:
        d: dict = {"normalization": None, "pca": None}
        if self.normalization is not None:
            d["normalization"] = {"minimum": self.normalization.minimum.tolist(),
                                  "maximum": self.normalization.maximum.tolist()}
        if self.pca is not None:
            d["pca"] = {k: getattr(self.pca, k).tolist()
                        for k in ("mean", "components", "explained_eigenvalues", "scale")}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Preprocessor":
        norm = pca = None
        if d.get("normalization"):
            n = d["normalization"]
            norm = NormalizationState(np.array(n["minimum"], float), np.array(n["maximum"], float))
        if d.get("pca"):
            pca = PcaProjection(**{k: np.array(v, float) for k, v in d["pca"].items()})
        return cls(norm, pca)


def preprocess(missions, cfg: PreprocessConfig):
    """Normalize, optionally project and oversample. All fits use only the
    first mission's training split; SMOTE touches training splits only."""
    first = missions[0][1].train
    norm = normalize_fit(first) if cfg.normalize else None
    pca = None
    if cfg.pca_components is not None:
        base = normalize_apply(norm, first) if norm is not None else first
        pca = pca_fit(base, cfg.pca_components, cfg.pca_standardize)
    prep = Preprocessor(norm, pca)
    out = []
    for i, (mission, split) in enumerate(missions):
        split = split.map(prep.transform)
        if cfg.smote:
            seed = int(np.random.SeedSequence([cfg.seed, i]).generate_state(1)[0])
            split = dataclasses.replace(split, train=smote_balance(split.train, cfg.smote_k, seed))
        out.append((mission, split))
    return out, prep


def resolve_missions(cfg: ExperimentConfig):
    if cfg.benchmark is not None:
        missions = generate_benchmark(cfg.benchmark)
    else:
        missions = read_dataset(cfg.dataset_dir)
    return preprocess(missions, cfg.preprocess)


# ----------------------------------------------------------------------- runs


def _one_run(args):
    cfg, missions, strategy, seed = args
    try:
        return run_scenario(cfg.scenario, missions, strategy, cfg.scenario_config(seed)), None
    except Exception as exc:  # one failing run must not sink the rest
        return None, f"{type(exc).__name__}: {exc}"


def execute(cfg: ExperimentConfig, missions, jobs: int = 1) -> list[ExperimentReport]:
    """Run every (strategy, seed) pair. Results come back in config order
    regardless of ``jobs``."""
    tasks = [(cfg, missions, s, seed) for s in cfg.strategies for seed in cfg.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one_run, tasks))
    else:
        results = [_one_run(t) for t in tasks]
    reports = []
    for (_, _, strategy, seed), (report, err) in zip(tasks, results):
        if report is None:
            log.error("run %s seed %d failed: %s", strategy, seed, err)
            report = ExperimentReport(cfg.scenario, strategy, seed, [], None, None, None, 0, None, [],
                                      status="failed")
        reports.append(report)
    return reports


def write_reports(reports: Sequence[ExperimentReport], out_dir, prep: Preprocessor | None = None,
                  extra: dict | None = None, stem: str = "reports") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    extra = extra or {}
    with open(out_dir / f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(extra) + list(CSV_COLUMNS), lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow({**{k: v for k, v in extra.items()}, **r.csv_row()})
    with open(out_dir / f"{stem}.json", "w", encoding="utf-8") as fh:
        json.dump({"format": "replaycl-reports", "version": FORMAT_VERSION,
                   "reports": [{**extra, **r.to_json()} for r in reports]}, fh, indent=2)
    if prep is None:
        return
    ck_dir = out_dir / "checkpoints"
    ck_dir.mkdir(exist_ok=True)
    for r in reports:
        if r.model is None:
            continue
        envelope = {
            "format": RUN_CHECKPOINT_FORMAT, "version": FORMAT_VERSION,
            "scenario": r.scenario, "strategy": r.strategy, "seed": r.seed,
            "classes": {str(h): c for h, c in r.class_ids.items()},
            "preprocess": prep.to_json(), "model": checkpoint_dict(r.model),
        }
        with open(ck_dir / f"{r.scenario}_{r.strategy}_seed{r.seed}.json", "w", encoding="utf-8") as fh:
            json.dump(envelope, fh)


def _summary(reports, knob=None) -> str:
    lines = []
    for r in reports:
        head = f"{knob[0]}={knob[1]} " if knob else ""
        acc = "-" if r.acc_avg is None else f"{r.acc_avg:.4f}"
        bwt = "-" if r.bwt is None else f"{r.bwt:+.4f}"
        lines.append(f"{head}{r.strategy:<14} seed {r.seed:<3} {r.status:<6} acc_avg {acc} bwt {bwt}")
    return "\n".join(lines)


# -------------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    spec = BenchmarkSpec.from_json(_read_json(args.config))
    if args.seed_override is not None:
        spec = dataclasses.replace(spec, seed=args.seed_override)
    manifest = write_dataset(generate_benchmark(spec), spec, args.out)
    print(f"wrote {len(manifest['missions'])} missions to {args.out}")
    return EXIT_OK


def _prepare(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.out is not None:
        changes["output_dir"] = Path(args.out)
    if args.seed_override is not None:
        changes["seeds"] = (args.seed_override,)
    return dataclasses.replace(cfg, **changes)


def cmd_run(args) -> int:
    cfg = _prepare(args)
    missions, prep = resolve_missions(cfg)
    reports = execute(cfg, missions, args.jobs)
    write_reports(reports, cfg.output_dir, prep)
    print(_summary(reports))
    return EXIT_OK if all(r.status == "ok" for r in reports) else EXIT_RUNTIME


def cmd_ablation(args) -> int:
    cfg = _prepare(args)
    values = args.values if args.values is not None else SWEEPS[args.sweep]
    if not values:
        raise ConfigError("ablation needs at least one sweep value")
    variants = [cfg.with_overrides(**{args.sweep: v}) for v in values]
    missions, _ = resolve_missions(cfg)
    all_reports, rows = [], []
    for v, variant in zip(values, variants):
        reports = execute(variant, missions, args.jobs)
        all_reports += reports
        rows += [({"knob": args.sweep, "value": _fmt_value(v)}, r) for r in reports]
        print(_summary(reports, (args.sweep, v)))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["knob", "value", *CSV_COLUMNS], lineterminator="\n")
        w.writeheader()
        for extra, r in rows:
            w.writerow({**extra, **r.csv_row()})
    groups = [{"value": v, "reports": [r.to_json() for e, r in rows if e["value"] == _fmt_value(v)]}
              for v in values]
    with open(out / "sweep.json", "w", encoding="utf-8") as fh:
        json.dump({"format": "replaycl-sweep", "version": FORMAT_VERSION, "knob": args.sweep,
                   "groups": groups}, fh, indent=2)
    return EXIT_OK if all(r.status == "ok" for r in all_reports) else EXIT_RUNTIME


def _fmt_value(v) -> str:
    return format(v, "g") if isinstance(v, float) else str(v)


def _read_feature_rows(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("missing header row", row=1)
    header = [h.strip() for h in rows[0]]
    cols = [i for i, h in enumerate(header) if h not in _NON_FEATURE]
    feats = []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells, got {len(row)}", row=r)
        try:
            feats.append([float(row[c]) for c in cols])
        except ValueError as exc:
            raise ParseError(str(exc), row=r) from None
    x = np.array(feats, dtype=np.float64).reshape(len(feats), len(cols))
    if not np.all(np.isfinite(x)):
        raise ParseError("non-finite feature value")
    return [header[c] for c in cols], x


def load_run_checkpoint(path):
    """-> (model, classes per head or None, preprocessor or None). Accepts run
    checkpoints and bare model checkpoints."""
    try:
        d = _read_json(path)
    except ConfigError as exc:
        raise FormatError(str(exc)) from exc
    if not isinstance(d, dict):
        raise FormatError("checkpoint root must be an object")
    if d.get("format") != RUN_CHECKPOINT_FORMAT:
        return model_from_dict(d), None, None
    if d.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported run checkpoint version {d.get('version')!r}")
    try:
        classes = {int(h): [int(c) for c in v] for h, v in d["classes"].items()}
        prep = Preprocessor.from_json(d["preprocess"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"corrupt run checkpoint: {exc}") from exc
    return model_from_dict(d["model"]), classes, prep


def cmd_infer(args) -> int:
    model, classes, prep = load_run_checkpoint(args.checkpoint)
    _, x = _read_feature_rows(args.input)
    expected = prep.n_input if prep is not None and prep.n_input is not None else model.trunk_dims[0]
    if x.shape[1] != expected:
        raise ConfigError(f"input has {x.shape[1]} feature columns, checkpoint expects {expected}")
    heads = list(model.heads)
    header = [c for h in heads for c in (f"head{h}_class", f"head{h}_prob")]
    cols = []
    if len(x):
        z = prep.transform_array(x) if prep is not None else x
        probs = model.forward_all(z)
        for h in heads:
            p = probs[h]
            local = p.argmax(axis=1)
            ids = np.asarray(classes[h])[local] if classes and h in classes else local
            cols += [ids, p.max(axis=1)]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(x)):
            w.writerow([str(int(v[i])) if j % 2 == 0 else format(float(v[i]), ".6f") for j, v in enumerate(cols)])
    print(f"wrote {len(x)} predictions for {len(heads)} heads to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="replaycl", description="Replay-based continual learning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic benchmark as per-mission CSVs")
    g.add_argument("--config", required=True, help="benchmark spec JSON")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed-override", type=int)
    g.set_defaults(func=cmd_generate)

    for name, func, text in (("run", cmd_run, "run every (strategy, seed) pair of a config"),
                             ("ablation", cmd_ablation, "sweep one knob and write sweep.csv")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True, help="experiment config JSON")
        s.add_argument("--out", help="output directory (overrides output_dir)")
        s.add_argument("--jobs", type=int, default=1, help="parallel runs")
        s.add_argument("--seed-override", type=int, help="replace the seeds list with one seed")
        if name == "ablation":
            s.add_argument("--sweep", required=True, choices=sorted(SWEEPS))
            s.add_argument("--values", type=float, nargs="*", help="knob values (default: the standard grid)")
        s.set_defaults(func=func)

    i = sub.add_parser("infer", help="per-head predictions for rows of a CSV")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True, help="CSV with a feature header")
    i.add_argument("--out", required=True, help="output CSV")
    i.set_defaults(func=cmd_infer)
    return p


def _setup_logging() -> None:
    level = os.environ.get("REPLAYCL_LOG", "WARNING").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "sweep", None) == "percentile" and args.values is not None:
        args.values = [int(v) if float(v).is_integer() else v for v in args.values]
    try:
        return args.func(args)
    except (InvalidInput, FormatError, ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ReplayClError, ArithmeticError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
