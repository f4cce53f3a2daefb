"""Command line entry point: ``quantssl {run,replay,sweep,audit} --config FILE``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 a bound audit found a violated inequality.

Any top-level scalar config key can be overridden from the environment with
the ``QSSL_`` prefix, e.g. ``QSSL_GAMMA_G=0.5`` or ``QSSL_MODE=soft``. Values
are parsed as JSON when possible and used as plain strings otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .diagnostics import (
    ISOLATED_CONVENTION,
    ReplayBudgetError,
    audit_bounds,
    gap_curve,
    replay,
    stream_order,
)
from .graph import estimate_sigma
from .learner import LearnerConfig, OnlineLearner, UnknownClassError
from .quantizer import RejectedInput
from .records import RecordError, StreamRecord, read_records

log = logging.getLogger("quantssl")

ENV_PREFIX = "QSSL_"
SCHEMA_VERSION = 1

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VIOLATION = 0, 1, 2, 3


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field '{field_name}': {message}")
        self.field = field_name


class DataError(ValueError):
    pass


@dataclass
class RunConfigFile:
    input: Path
    classes: list[str]
    capacity: int = 200
    gamma_g: float = 0.1
    sigma: float | str = "auto"
    sigma_warmup: int = 100
    feature_scaling: int | str = 1
    epsilon: float | None = None
    multiplier: float = 1.5
    mode: str = "hard"
    c_l: float = 1.0
    c_u: float = 0.01
    outlier_rejection: bool = True
    format: str | None = None
    seed_set: Path | None = None
    output_dir: Path = Path("out")
    random_seed: int = 0
    max_points: int = 5000
    ks: list[int] = field(default_factory=lambda: [50, 100, 200, 400])
    seeds: int = 1
    gammas: list[float] | None = None
    with_online: bool = False
    online_steps: str | int | list[int] = "all"
    gap_steps: str | int | list[int] = "all"

    @classmethod
    def from_dict(cls, raw: dict[str, Any], base: Path) -> "RunConfigFile":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        for required in ("input", "classes"):
            if required not in raw:
                raise ConfigError(required, "missing required field")
        data = dict(raw)
        for key in ("input", "seed_set", "output_dir"):
            if data.get(key) is not None:
                p = Path(data[key])
                data[key] = p if p.is_absolute() else (base / p)
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        need(isinstance(self.classes, list) and len(self.classes) >= 2, "classes", "needs at least two class names")
        self.classes = [str(c) for c in self.classes]
        need(len(set(self.classes)) == len(self.classes), "classes", "class names must be distinct")
        need(_is_int(self.capacity) and self.capacity >= 1, "capacity", "must be an integer >= 1")
        need(_is_num(self.gamma_g) and self.gamma_g >= 0, "gamma_g", "must be a number >= 0")
        need(self.sigma == "auto" or (_is_num(self.sigma) and self.sigma > 0), "sigma", "must be > 0 or 'auto'")
        need(_is_int(self.sigma_warmup) and self.sigma_warmup >= 2, "sigma_warmup", "must be an integer >= 2")
        need(
            self.feature_scaling == "features" or (_is_int(self.feature_scaling) and self.feature_scaling >= 1),
            "feature_scaling",
            "must be an integer >= 1 or 'features'",
        )
        need(self.epsilon is None or (_is_num(self.epsilon) and self.epsilon >= 0), "epsilon", "must be >= 0 or null")
        need(_is_num(self.multiplier) and self.multiplier > 1, "multiplier", "must be > 1")
        need(self.mode in ("hard", "soft"), "mode", "must be 'hard' or 'soft'")
        need(_is_num(self.c_l) and _is_num(self.c_u) and self.c_l >= self.c_u > 0, "c_u", "need c_l >= c_u > 0")
        need(isinstance(self.outlier_rejection, bool), "outlier_rejection", "must be true or false")
        need(self.format in (None, "csv", "jsonl"), "format", "must be 'csv', 'jsonl' or null")
        need(_is_int(self.random_seed), "random_seed", "must be an integer")
        need(_is_int(self.max_points) and self.max_points >= 1, "max_points", "must be an integer >= 1")
        need(
            isinstance(self.ks, list) and self.ks and all(_is_int(k) and k >= 1 for k in self.ks),
            "ks",
            "must be a non-empty list of integers >= 1",
        )
        need(_is_int(self.seeds) and self.seeds >= 1, "seeds", "must be an integer >= 1")
        need(
            self.gammas is None or (isinstance(self.gammas, list) and all(_is_num(g) and g > 0 for g in self.gammas)),
            "gammas",
            "must be a list of numbers > 0",
        )
        for name in ("online_steps", "gap_steps"):
            v = getattr(self, name)
            need(
                v == "all" or (_is_int(v) and v >= 1) or (isinstance(v, list) and all(_is_int(s) for s in v)),
                name,
                "must be 'all', a stride >= 1 or a list of steps",
            )

    def learner_config(self, dim: int, sigma: float) -> LearnerConfig:
        p = dim if self.feature_scaling == "features" else int(self.feature_scaling)
        return LearnerConfig(
            capacity=int(self.capacity),
            classes=tuple(self.classes),
            gamma_g=float(self.gamma_g),
            sigma=float(sigma),
            feature_scaling=p,
            epsilon=None if self.epsilon is None else float(self.epsilon),
            multiplier=float(self.multiplier),
            mode=self.mode,
            c_l=float(self.c_l),
            c_u=float(self.c_u),
            outlier_rejection=self.outlier_rejection,
        )


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def load_config(path, env: dict[str, str] | None = None) -> RunConfigFile:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"{path} is not valid JSON ({exc.msg}, line {exc.lineno})") from None
    if not isinstance(raw, dict):
        raise ConfigError("--config", "top level must be an object")
    env = os.environ if env is None else env
    for key, value in env.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            try:
                raw[name] = json.loads(value)
            except json.JSONDecodeError:
                raw[name] = value
    try:
        return RunConfigFile.from_dict(raw, path.parent)
    except TypeError as exc:
        raise ConfigError("--config", str(exc)) from None


# -- helpers -----------------------------------------------------------------


def _load_dataset(cfg: RunConfigFile) -> list[StreamRecord]:
    records: list[StreamRecord] = []
    if cfg.seed_set is not None:
        records.extend(_checked(read_records(cfg.seed_set)))
        if any(r.label is None for r in records):
            raise DataError(f"{cfg.seed_set}: every seed record needs a label")
    for rec in _checked(read_records(cfg.input, cfg.format)):
        records.append(rec)
        if len(records) > cfg.max_points:
            raise ReplayBudgetError(len(records), cfg.max_points)
    if records and len({len(r.features) for r in records}) != 1:
        raise DataError("seed set and input disagree on feature dimension")
    return records


def _checked(records):
    try:
        yield from records
    except OSError as exc:
        raise DataError(f"cannot read input: {exc}") from None


def _resolve_sigma(cfg: RunConfigFile, warmup: Sequence[StreamRecord]) -> float:
    if cfg.sigma != "auto":
        return float(cfg.sigma)
    try:
        return estimate_sigma([r.features for r in warmup])
    except ValueError as exc:
        raise DataError(f"cannot estimate sigma from warm-up records: {exc}") from None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _write_table(path: Path, columns: Sequence[str], rows, comments: Sequence[str] = ()) -> None:
    with path.open("w") as fh:
        fh.write(f"# schema_version\t{SCHEMA_VERSION}\n")
        for c in comments:
            fh.write(f"# {c}\n")
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(v) for v in row) + "\n")


def _class_name(cfg: LearnerConfig, idx: int | None) -> str:
    return "abstain" if idx is None or idx < 0 else str(cfg.classes[idx])


# -- subcommands ---------------------------------------------------------------


def cmd_run(cfg: RunConfigFile, out: Path) -> int:
    seeds = list(_checked(read_records(cfg.seed_set))) if cfg.seed_set is not None else []
    if any(r.label is None for r in seeds):
        raise DataError(f"{cfg.seed_set}: every seed record needs a label")
    stream = _checked(read_records(cfg.input, cfg.format))

    # sigma='auto' needs a short warm-up buffer; everything else is strictly one record at a time
    buffered: list[StreamRecord] = []
    if cfg.sigma == "auto":
        for rec in stream:
            buffered.append(rec)
            if len(seeds) + len(buffered) >= cfg.sigma_warmup:
                break
    first = (seeds + buffered)[:1]
    learner = None
    if first:
        sigma = _resolve_sigma(cfg, seeds + buffered)
        learner = OnlineLearner(cfg.learner_config(len(first[0].features), sigma))
        try:
            learner.seed([(r.features, r.label) for r in seeds])
        except (UnknownClassError, RejectedInput) as exc:
            raise DataError(f"seed set: {exc}") from None

    n = evaluated = correct = abstained = outliers = 0
    latencies = []
    with (out / "predictions.jsonl").open("w") as pred_fh:
        def consume(rec: StreamRecord):
            nonlocal learner, n, evaluated, correct, abstained, outliers
            if learner is None:
                learner = OnlineLearner(cfg.learner_config(len(rec.features), _resolve_sigma(cfg, [rec])))
            try:
                step = learner.step(rec.features, rec.label)
            except (UnknownClassError, RejectedInput) as exc:
                raise DataError(f"{cfg.input}:{rec.line}: {exc}") from None
            n += 1
            latencies.append(step.wall_time)
            outliers += step.outlier
            abstained += step.abstained
            predicted = _class_name(learner.config, step.prediction)
            if rec.eval_label is not None:
                evaluated += 1
                correct += predicted == rec.eval_label
            pred_fh.write(
                json.dumps(
                    {"id": rec.id, "prediction": predicted, "margin": step.margin, "outlier": step.outlier},
                    sort_keys=True,
                )
                + "\n"
            )

        for rec in buffered:
            consume(rec)
        for rec in stream:
            consume(rec)

    cs = learner.centroids if learner is not None else None
    metrics = [
        ("n_records", n),
        ("n_seeds", len(seeds)),
        ("n_evaluated", evaluated),
        ("accuracy", correct / evaluated if evaluated else math.nan),
        ("abstention_rate", abstained / n if n else math.nan),
        ("outliers", outliers),
        ("conflicts", learner.conflicts if learner is not None else 0),
        ("n_labeled", learner.n_labeled if learner is not None else 0),
        ("centroids", len(cs) if cs is not None else 0),
        ("radius", cs.radius if cs is not None and cs.radius is not None else math.nan),
        ("sigma", learner.config.sigma if learner is not None else math.nan),
    ]
    _write_table(out / "metrics.tsv", ("metric", "value"), metrics)
    lat = np.array(latencies) * 1e6
    timing = [
        (name, float(np.percentile(lat, q)) if lat.size else math.nan)
        for name, q in (("p50_us", 50), ("p90_us", 90), ("p99_us", 99), ("max_us", 100))
    ]
    _write_table(out / "timing.tsv", ("metric", "value"), timing, ["wall-clock latencies; not reproducible"])
    log.info("run: %d records, accuracy %s, abstention %s", n, _fmt(metrics[3][1]), _fmt(metrics[4][1]))
    return EXIT_OK


def _dataset_arrays(cfg: RunConfigFile):
    records = _load_dataset(cfg)
    if not records:
        return records, np.empty((0, 0)), [], [], None
    x = np.array([r.features for r in records])
    sigma = float(cfg.sigma) if cfg.sigma != "auto" else _resolve_sigma(cfg, records)
    learner_cfg = cfg.learner_config(x.shape[1], sigma)
    train = [r.label for r in records]
    truth = [r.eval_label if r.eval_label is not None else r.label for r in records]
    for name, labels in (("label", train), ("eval_label", truth)):
        for r, y in zip(records, labels):
            if y is not None and y not in learner_cfg.classes:
                raise DataError(f"line {r.line}: unknown class {y!r} in '{name}'")
    return records, x, train, truth, learner_cfg


def _steps(spec, n: int):
    # an integer is a stride; the last step is always included so the final row is complete
    if spec == "all":
        return None
    if isinstance(spec, int):
        return sorted(set(range(spec, n + 1, spec)) | {n})
    return spec


def cmd_replay(cfg: RunConfigFile, out: Path) -> int:
    records, x, train, truth, lcfg = _dataset_arrays(cfg)
    columns = (
        "step", "id", "truth", "train_label", "quantized_pred", "quantized_score", "online_score",
        "offline_score", "gap", "gap_unnormalized", "cum_acc_quantized", "cum_acc_online",
        "cum_acc_offline", "n_centroids", "radius",
    )
    if not records:
        _write_table(out / "replay.tsv", columns, [], [ISOLATED_CONVENTION])
        return EXIT_OK
    trace = replay(
        x, train, lcfg, truth=truth, online_steps=_steps(cfg.online_steps, len(records)),
        gap_steps=_steps(cfg.gap_steps, len(records)), max_points=cfg.max_points, spectrum=False,
    )
    acc = {f: trace.cumulative_accuracy(f) for f in ("quantized", "online", "offline")}
    rows = []
    for i, idx in enumerate(trace.stream_index):
        rows.append((
            i + 1, records[idx].id, _class_name(lcfg, int(trace.truth[i])),
            "" if trace.train_labels[i] < 0 else lcfg.classes[trace.train_labels[i]],
            _class_name(lcfg, int(trace.quantized_pred[i])),
            float(trace.quantized[i, 0]), float(trace.online[i, 0]), float(trace.offline[i, 0]),
            float(trace.gap[i]), float(trace.gap_unnormalized[i]),
            float(acc["quantized"][i]), float(acc["online"][i]), float(acc["offline"][i]),
            int(trace.n_centroids[i]), float(trace.radius[i]),
        ))
    comments = [
        ISOLATED_CONVENTION,
        f"scores are the one-vs-rest column of class {lcfg.classes[0]!r}",
        f"outliers rejected: {len(trace.outliers)}",
        f"final_gap {_fmt(trace.final_gap)} final_gap_unnormalized {_fmt(trace.final_gap_unnormalized)}",
    ]
    _write_table(out / "replay.tsv", columns, rows, comments)
    return EXIT_OK


def _sweep_one(args):
    x, train, truth, lcfg, k, seeds, with_online, max_points = args
    return gap_curve(x, train, lcfg, [k], truth=truth, seeds=seeds, with_online=with_online, max_points=max_points)[0]


def cmd_sweep(cfg: RunConfigFile, out: Path, jobs: int = 1) -> int:
    records, x, train, truth, lcfg = _dataset_arrays(cfg)
    columns = ("k", "mean_gap", "mean_acc_quantized", "mean_acc_offline", "mean_acc_online", "n_seeds", "gaps")
    if not records:
        _write_table(out / "sweep.tsv", columns, [], [ISOLATED_CONVENTION])
        return EXIT_OK
    seeds = [cfg.random_seed + i for i in range(cfg.seeds)]
    tasks = [(x, train, truth, lcfg, k, seeds, cfg.with_online, cfg.max_points) for k in cfg.ks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]
    rows = [
        (r.k, r.mean_gap, r.mean_accuracy_quantized, r.mean_accuracy_offline, r.mean_accuracy_online,
         len(seeds), ",".join(repr(g) for g in r.gaps))
        for r in results
    ]
    _write_table(out / "sweep.tsv", columns, rows, [ISOLATED_CONVENTION, f"stream seeds {seeds}"])
    return EXIT_OK


def cmd_audit(cfg: RunConfigFile, out: Path) -> int:
    records, x, train, truth, lcfg = _dataset_arrays(cfg)
    columns = ("gamma_g", "seed", "check", "evaluated", "worst_lhs", "worst_rhs", "min_slack", "max_ratio", "violations")
    rows, info_rows, messages = [], [], []
    if records:
        gammas = cfg.gammas or [cfg.gamma_g]
        for g in gammas:
            if not g > 0:
                raise ConfigError("gamma_g", "audits need gamma_g > 0")
            soft = dataclasses.replace(lcfg, mode="soft", gamma_g=float(g))
            for seed in (cfg.random_seed + i for i in range(cfg.seeds)):
                order = stream_order(train, seed if cfg.seeds > 1 else None)
                trace = replay(x, train, soft, truth=truth, order=order, max_points=cfg.max_points)
                report = audit_bounds(trace)
                for c in report.checks:
                    rows.append((g, seed, c.name, c.evaluated, c.worst_lhs, c.worst_rhs, c.min_slack, c.max_ratio, c.violations))
                for key, value in sorted(report.info.items()):
                    info_rows.append((g, seed, key, value))
                messages.extend(f"gamma_g={g} seed={seed}: {m}" for m in report.violations)
    _write_table(out / "audit.tsv", columns, rows, ["audits replay the stream with soft constraints"])
    _write_table(out / "audit_info.tsv", ("gamma_g", "seed", "quantity", "value"), info_rows,
                 ["reported only; the stability bound is evaluated exactly as printed"])
    for m in messages:
        log.error("bound violated: %s", m)
    if messages:
        return EXIT_VIOLATION
    log.info("audit: %d checks, no violations", len(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantssl", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "stream the input through the online learner and emit predictions"),
        ("replay", "replay the dataset against full-graph oracles, one row per step"),
        ("sweep", "normalized Laplacian gap and accuracy as a function of k"),
        ("audit", "check every proved inequality on replayed soft-constrained runs"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--output-dir", help="overrides output_dir from the config")
        p.add_argument("--seed", type=int, help="overrides random_seed from the config")
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1, help="parallel workers across k values")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(args.log_level)
    try:
        cfg = load_config(args.config)
        if args.output_dir:
            cfg.output_dir = Path(args.output_dir)
        if args.seed is not None:
            cfg.random_seed = args.seed
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "run":
            return cmd_run(cfg, out)
        if args.command == "replay":
            return cmd_replay(cfg, out)
        if args.command == "sweep":
            return cmd_sweep(cfg, out, jobs=args.jobs)
        return cmd_audit(cfg, out)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except ReplayBudgetError as exc:
        log.error("refusing replay: %s", exc)
        return EXIT_DATA
    except (RecordError, DataError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
