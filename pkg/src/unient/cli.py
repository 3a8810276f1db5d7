"""Command-line runner: ``unient pretrain|adapt|sweep|report``.

Configuration is a TOML file with sections ``[experiment]``, ``[benchmark]``,
``[pretrain]``, ``[adapt]`` and ``[sweep]``. Any field can be overridden on
the command line as ``--section.key=value`` (values parsed as TOML).

Seeds: each run seed ``s`` pairs with the checkpoint found at
``checkpoint_path.format(seed=s)``. The cluster geometry always comes from
the seed stored in that checkpoint; the test stream is sampled from ``s``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import adapt, bench, metrics, nn
from .filter import SourceFilter

log = logging.getLogger("unient")

SWEEP_AXES = {
    "lambda1": ("adapt", "lambda1", float),
    "lambda2": ("adapt", "lambda2", float),
    "ratio": ("benchmark", "csood_ratio", float),
    "openness": ("benchmark", "unknown_class_count_active", int),
    "rounds": ("benchmark", "repeat_rounds", int),
}
SWEEP_FIELDS = ("axis_value", "seed", "method", "acc", "auroc", "fpr95", "oscr", "config_digest")
DUMP_FIELDS = ("batch", "domain_kind", "severity", "score", "posterior", "true_is_csood")


class ConfigError(ValueError):
    """Bad configuration or usage; maps to exit code 2."""


@dataclass
class SweepConfig:
    axis: str = "ratio"
    values: list = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0])
    methods: list = field(default_factory=lambda: ["tent", "unient"])


@dataclass
class ExperimentConfig:
    benchmark: bench.BenchmarkConfig = field(default_factory=bench.BenchmarkConfig)
    pretrain: nn.PretrainConfig = field(default_factory=nn.PretrainConfig)
    adapt: adapt.AdaptConfig = field(default_factory=adapt.AdaptConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    checkpoint_path: str = "runs/checkpoint_seed{seed}.json"
    output_dir: str = "runs"
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    score_kind: str = "energy"

    def digest(self):
        """Hash of everything that shapes results except seeds, paths and method."""
        d = {
            "benchmark": _plain(self.benchmark),
            "pretrain": _plain(self.pretrain),
            "adapt": {k: v for k, v in _plain(self.adapt).items() if k != "method"},
            "score_kind": self.score_kind,
        }
        d["benchmark"].pop("seed")
        return metrics.config_digest(d)

    def validate(self):
        if not self.seeds:
            raise ConfigError("experiment.seeds must be nonempty")
        if self.score_kind not in metrics.SCORE_KINDS:
            raise ConfigError(f"unknown score_kind {self.score_kind!r}; valid: {', '.join(metrics.SCORE_KINDS)}")
        try:
            self.benchmark.validate()
            self.adapt.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self


def _plain(obj):
    return json.loads(json.dumps(dataclasses.asdict(obj)))


_SECTIONS = {"benchmark": bench.BenchmarkConfig, "pretrain": nn.PretrainConfig, "adapt": adapt.AdaptConfig, "sweep": SweepConfig}
_TUPLE_FIELDS = {("pretrain", "hidden"), ("adapt", "adam_betas")}


def _build(section, cls, values):
    names = {f.name for f in dataclasses.fields(cls)}
    if section == "benchmark":
        names.discard("seed")
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in [{section}]; valid: {', '.join(sorted(names))}")
    values = {k: tuple(v) if (section, k) in _TUPLE_FIELDS else v for k, v in values.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}]: {e}") from None


def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_overrides(extra):
    """``['--adapt.lr=0.01', '--sweep.values', '[1,2]']`` -> {section: {key: value}}."""
    out = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or "." not in arg:
            raise ConfigError(f"unrecognized argument {arg!r}; overrides look like --section.key=value")
        key = arg[2:]
        if "=" in key:
            key, text = key.split("=", 1)
        elif i + 1 < len(extra):
            i += 1
            text = extra[i]
        else:
            raise ConfigError(f"override {arg!r} has no value")
        section, name = key.split(".", 1)
        out.setdefault(section, {})[name] = _parse_value(text)
        i += 1
    return out


def load_config(path=None, overrides=None):
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = tomllib.loads(p.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{p}: {e}") from None
    for section, kv in (overrides or {}).items():
        raw.setdefault(section, {}).update(kv)
    unknown = sorted(set(raw) - set(_SECTIONS) - {"experiment"})
    if unknown:
        raise ConfigError(f"unknown section(s) {unknown}; valid: experiment, {', '.join(_SECTIONS)}")
    kwargs = {s: _build(s, cls, raw.get(s, {})) for s, cls in _SECTIONS.items()}
    exp = raw.get("experiment", {})
    names = {f.name for f in dataclasses.fields(ExperimentConfig)} - set(_SECTIONS)
    bad = sorted(set(exp) - names)
    if bad:
        raise ConfigError(f"unknown key(s) {bad} in [experiment]; valid: {', '.join(sorted(names))}")
    return ExperimentConfig(**kwargs, **exp)


# ---------------------------------------------------------------- helpers


def _require_dir(path):
    d = Path(path)
    if not d.is_dir():
        raise ConfigError(f"output directory does not exist: {d}")
    return d


def checkpoint_for(cfg, seed):
    return Path(str(cfg.checkpoint_path).format(seed=seed))


def expected_dims(cfg):
    return [cfg.benchmark.d, *cfg.pretrain.hidden, cfg.benchmark.C_s]


def load_source(cfg, seed):
    """Checkpoint for run ``seed`` plus the benchmark config carrying its geometry seed."""
    path = checkpoint_for(cfg, seed)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path} (run `unient pretrain` first)")
    model, ck_seed = nn.load_checkpoint(path)
    if list(model.dims) != expected_dims(cfg):
        raise ConfigError(f"checkpoint {path} has dims {list(model.dims)} but the config expects {expected_dims(cfg)}")
    return model, dataclasses.replace(cfg.benchmark, seed=ck_seed)


def run_one(cfg, method, seed, model=None, bcfg=None):
    if model is None:
        model, bcfg = load_source(cfg, seed)
    acfg = dataclasses.replace(cfg.adapt, method=method)
    report, _ = adapt.run_stream(model, bench.stream(bcfg, seed=seed), acfg, score_kind=cfg.score_kind)
    return report


def dump_scores(model, bcfg, seed, path):
    """Filter scores and posteriors per sample; independent of the adaptation method."""
    sf = SourceFilter(model)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DUMP_FIELDS)
        for t, b in enumerate(bench.stream(bcfg, seed=seed)):
            fo = sf(b.x)
            for s, p, o in zip(fo.scores, fo.posteriors, b.is_csood):
                w.writerow([t, b.domain_tag[0], b.domain_tag[1], repr(float(s)), repr(float(p)), int(o)])


def _fmt(v):
    return "  n/a" if v is None else f"{v:6.2f}"


def _headline(method, seed, report):
    return (
        f"{method:<11} seed {seed:<3} acc {_fmt(report.acc)}  auroc {_fmt(report.auroc)}  "
        f"fpr95 {_fmt(report.fpr_at_tpr95)}  oscr {_fmt(report.oscr)}"
    )


# ---------------------------------------------------------------- commands


def cmd_pretrain(cfg, args):
    for seed in cfg.seeds:
        path = checkpoint_for(cfg, seed)
        _require_dir(path.parent)
        bcfg = dataclasses.replace(cfg.benchmark, seed=seed)
        train = bench.make_source(bcfg, cfg.pretrain.n_train_per_class, "train")
        test = bench.make_source(bcfg, cfg.pretrain.n_test_per_class, "test")
        model = nn.pretrain(train, cfg.pretrain, seed=seed)
        nn.save_checkpoint(model, path, seed=seed)
        acc = 100 * nn.accuracy(model, test.x, test.y)
        print(f"seed {seed}: source test accuracy {acc:.2f}% -> {path}")
    return 0


def cmd_adapt(cfg, args):
    out = _require_dir(cfg.output_dir) / args.method
    digest = cfg.digest()
    rows = []
    for seed in cfg.seeds:
        model, bcfg = load_source(cfg, seed)
        report = run_one(cfg, args.method, seed, model, bcfg)
        run_dir = out / f"seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics.write_report_json(report, run_dir / "report.json", args.method, digest, seed)
        if args.dump_scores:
            dump_scores(model, bcfg, seed, run_dir / "scores.csv")
        rows.append(metrics.csv_row(report, args.method, seed, digest))
        print(_headline(args.method, seed, report))
    metrics.write_results_csv(rows, out / "results.csv")
    return 0


def sweep_rows(cfg, axis, values, methods):
    """Rows of SWEEP_FIELDS: one per (value, seed, method), then a delta row per method."""
    section, key, cast = SWEEP_AXES[axis]
    digest = cfg.digest()
    rows, per = [], {}
    for v in values:
        v = cast(v)
        sub = getattr(cfg, section)
        point = dataclasses.replace(cfg, **{section: dataclasses.replace(sub, **{key: v})})
        try:
            point.validate()
        except ConfigError as e:
            raise ConfigError(f"{axis}={v}: {e}") from None
        for seed in cfg.seeds:
            model, bcfg = load_source(point, seed)
            for m in methods:
                r = run_one(point, m, seed, model, bcfg)
                row = [v, seed, m, r.acc, r.auroc, r.fpr_at_tpr95, r.oscr]
                rows.append(row)
                per.setdefault(m, {}).setdefault(v, []).append(row[3:])
                print(f"{axis}={v:<6} " + _headline(m, seed, r))
    deltas = []
    for m, by_value in per.items():
        means = np.array([np.mean(np.array(rs, dtype=float), axis=0) for rs in by_value.values()])
        spread = means.max(axis=0) - means.min(axis=0)
        deltas.append(["delta", "mean", m, *spread.tolist()])
    return rows, deltas, digest


def cmd_sweep(cfg, args):
    axis = args.axis or cfg.sweep.axis
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; valid: {', '.join(SWEEP_AXES)}")
    values = cfg.sweep.values if args.values is None else [_parse_value(s) for s in args.values.split(",") if s.strip()]
    if not values:
        raise ConfigError("sweep values are empty")
    methods = [args.method] if args.method else list(cfg.sweep.methods)
    for m in methods:
        if m not in adapt.METHODS:
            raise ConfigError(f"unknown method {m!r}; valid: {', '.join(adapt.METHODS)}")
    out = _require_dir(cfg.output_dir)
    rows, deltas, digest = sweep_rows(cfg, axis, values, methods)
    path = out / f"sweep_{axis}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for r in rows + deltas:
            w.writerow([r[0], r[1], r[2], *("" if x is None else repr(float(x)) for x in r[3:]), digest])
    for d in deltas:
        print(f"delta {d[2]:<11} acc {d[3]:6.2f}  auroc {d[4]:6.2f}  fpr95 {d[5]:6.2f}  oscr {d[6]:6.2f}")
    print(f"wrote {path}")
    return 0


def cmd_report(cfg, args):
    out = _require_dir(cfg.output_dir)
    paths = sorted(out.glob("*/seed*/report.json"))
    if not paths:
        raise ConfigError(f"no report.json files under {out}")
    reports = [json.loads(p.read_text(encoding="utf-8")) for p in paths]
    digests = {r["config_digest"] for r in reports}
    if len(digests) > 1:
        raise ConfigError(f"refusing to aggregate reports from different configs: digests {sorted(digests)}")
    by_method = {}
    for r in reports:
        by_method.setdefault(r["method"], []).append(r)
    keys = ("acc", "auroc", "fpr_at_tpr95", "oscr")
    (digest,) = digests
    rows = []
    for m in adapt.METHODS:
        if m not in by_method:
            continue
        rs = by_method[m]
        means = [np.mean([r[k] for r in rs]) if all(r[k] is not None for r in rs) else None for k in keys]
        rows.append([m, len(rs), *means])
        print(f"{m:<11} n={len(rs)}  " + "  ".join(f"{k} {_fmt(v)}" for k, v in zip(("acc", "auroc", "fpr95", "oscr"), means)))
    path = out / "summary.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "n_seeds", "acc", "auroc", "fpr95", "oscr", "config_digest"))
        for r in rows:
            w.writerow([r[0], r[1], *("" if x is None else repr(float(x)) for x in r[2:]), digest])
    print(f"wrote {path}")
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "adapt": cmd_adapt, "sweep": cmd_sweep, "report": cmd_report}


def build_parser():
    ap = argparse.ArgumentParser(prog="unient", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, help="run a single seed instead of experiment.seeds")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("adapt", "sweep"):
            p.add_argument("--method", choices=adapt.METHODS, default="unient" if name == "adapt" else None)
        if name == "adapt":
            p.add_argument("--dump-scores", action="store_true", help="write per-sample filter scores")
        if name == "sweep":
            p.add_argument("--axis", help=f"one of {', '.join(SWEEP_AXES)}")
            p.add_argument("--values", help="comma-separated axis values")
    return ap


def main(argv=None):
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, parse_overrides(extra))
        if args.seed is not None:
            cfg.seeds = [args.seed]
        cfg.validate()
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"unient: error: {e}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError) as e:
        print(f"unient: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
