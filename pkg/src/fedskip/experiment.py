"""Experiment configuration, the run/compare drivers and their output files.

Output files (UTF-8, LF, ``.`` decimals; floats written with ``repr`` so they
parse back exactly):

``rounds.csv``
    one row per (round, client): t, client_id, decision, pred_mag,
    uncertainty, actual_norm, bytes_up, bytes_down, global_accuracy,
    global_loss. Empty cells mean "not applicable" (FedAvg forecasts, norms
    of skipped clients).
``curves.csv``
    one row per round: t, accuracy, cumulative_mb, skip_rate.
``summary.json``
    final accuracy, traffic totals, skip rates, wall time and the resolved
    configuration.
``checkpoint.json`` (optional)
    final global parameters with their layout, plus every twin's state.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import datasets as ds
from .errors import ConfigError
from .fed import MB, RoundLog, SkipThresholds, Strategy, run_experiment
from .nn import Arch, TrainConfig, build_model
from .twin import TwinConfig

log = logging.getLogger(__name__)

ROUNDS_COLUMNS = ["t", "client_id", "decision", "pred_mag", "uncertainty", "actual_norm",
                  "bytes_up", "bytes_down", "global_accuracy", "global_loss"]
CURVES_COLUMNS = ["t", "accuracy", "cumulative_mb", "skip_rate"]

DATASETS = ("mnist", "ucihar", "synthetic")
STRATEGIES = (Strategy.FEDAVG, Strategy.FEDSKIPTWIN)


@dataclass(frozen=True)
class SyntheticConfig:
    n_train: int = 2000
    n_test: int = 500
    num_classes: int = 4
    dim: int = 16


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    data_paths: dict = field(default_factory=dict)
    n_clients: int = 10
    alpha: float = 0.5
    rounds: int = 20
    local_epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 0.01
    strategy: str = Strategy.FEDSKIPTWIN
    tau_mag: float = 0.001
    tau_unc: float = 0.001
    twin: TwinConfig = field(default_factory=TwinConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    seed: int = 0
    output_dir: str = "runs/default"
    eval_subsample: int | None = None
    train_subsample: int | None = None
    threads: int = 1
    checkpoint: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.local_epochs, self.batch_size, self.seed)

    def strategy_obj(self) -> Strategy:
        if self.strategy == Strategy.FEDAVG:
            return Strategy.fedavg()
        return Strategy.fedskiptwin(SkipThresholds(self.tau_mag, self.tau_unc))

    def with_(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        """Digest of every setting that affects results, strategy excluded."""
        d = self.to_dict()
        for key in ("strategy", "output_dir", "threads", "checkpoint"):
            d.pop(key)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# parsing and validation

_INT_FIELDS = {"n_clients", "rounds", "local_epochs", "batch_size", "seed", "threads"}
_FLOAT_FIELDS = {"alpha", "learning_rate", "tau_mag", "tau_unc"}
_OPT_INT_FIELDS = {"eval_subsample", "train_subsample"}


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _nested(cls, raw, name):
    if not isinstance(raw, dict):
        raise ConfigError(f"{name} must be an object", name)
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown key: {name}.{key}", f"{name}.{key}")
        default = known[key].default
        ok = _is_number(value) if isinstance(default, float) else _is_int(value)
        if not ok:
            raise ConfigError(f"{name}.{key} must be a number", f"{name}.{key}")
    try:
        return cls(**raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}", name) from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key: {key}", key)
    values = {}
    for key, value in raw.items():
        if key in _INT_FIELDS and not _is_int(value):
            raise ConfigError(f"{key} must be an integer", key)
        if key in _FLOAT_FIELDS and not _is_number(value):
            raise ConfigError(f"{key} must be a number", key)
        if key in _OPT_INT_FIELDS and value is not None and not _is_int(value):
            raise ConfigError(f"{key} must be an integer or null", key)
        if key in ("dataset", "strategy", "output_dir") and not isinstance(value, str):
            raise ConfigError(f"{key} must be a string", key)
        if key == "data_paths" and not (isinstance(value, dict)
                                        and all(isinstance(v, str) for v in value.values())):
            raise ConfigError("data_paths must map names to path strings", key)
        if key == "checkpoint" and not isinstance(value, bool):
            raise ConfigError("checkpoint must be true or false", key)
        values[key] = value
    if "twin" in values:
        values["twin"] = _nested(TwinConfig, values["twin"], "twin")
    if "synthetic" in values:
        values["synthetic"] = _nested(SyntheticConfig, values["synthetic"], "synthetic")
    for key in ("alpha", "learning_rate", "tau_mag", "tau_unc"):
        if key in values:
            values[key] = float(values[key])
    cfg = ExperimentConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig, check_paths: bool = True) -> None:
    def need(cond, name, msg):
        if not cond:
            raise ConfigError(f"{name}: {msg}", name)

    need(cfg.dataset in DATASETS, "dataset", f"must be one of {', '.join(DATASETS)}")
    need(cfg.strategy in STRATEGIES, "strategy", f"must be one of {', '.join(STRATEGIES)}")
    need(cfg.n_clients >= 1, "n_clients", "must be >= 1")
    need(cfg.rounds >= 1, "rounds", "must be >= 1")
    need(cfg.local_epochs >= 1, "local_epochs", "must be >= 1")
    need(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    need(cfg.alpha > 0, "alpha", "must be > 0")
    need(cfg.learning_rate > 0, "learning_rate", "must be > 0")
    need(cfg.tau_mag >= 0 and cfg.tau_mag != float("inf"), "tau_mag", "must be finite and >= 0")
    need(cfg.tau_unc >= 0 and cfg.tau_unc != float("inf"), "tau_unc", "must be finite and >= 0")
    need(cfg.threads >= 1, "threads", "must be >= 1")
    need(cfg.eval_subsample is None or cfg.eval_subsample >= 1, "eval_subsample", "must be >= 1")
    need(cfg.train_subsample is None or cfg.train_subsample >= 1, "train_subsample", "must be >= 1")
    s = cfg.synthetic
    need(min(s.n_train, s.n_test, s.num_classes, s.dim) >= 1, "synthetic", "all sizes must be >= 1")
    if check_paths and cfg.dataset != "synthetic":
        try:
            resolve_data_paths(cfg)
        except FileNotFoundError as exc:
            raise ConfigError(f"data_paths: {exc}", "data_paths") from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror or exc}") from None
    return parse_config_text(text, source=str(path))


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# data


def resolve_data_paths(cfg: ExperimentConfig) -> dict[str, Path]:
    paths = {k: Path(v) for k, v in cfg.data_paths.items()}
    root = paths.get("root")
    if root is None and ds.default_data_root() is not None:
        base = ds.default_data_root()
        root = base / ("mnist" if cfg.dataset == "mnist" else "ucihar")
    if cfg.dataset == "mnist":
        explicit = [k for k in ds.MNIST_FILES if k in paths]
        if len(explicit) == len(ds.MNIST_FILES):
            for k in ds.MNIST_FILES:
                if not paths[k].is_file():
                    raise FileNotFoundError(f"{k} not found: {paths[k]}")
            return {k: paths[k] for k in ds.MNIST_FILES}
        if root is None:
            raise FileNotFoundError("set data_paths.root or FEDSKIP_DATA_DIR for MNIST")
        return ds.find_mnist_files(root)
    if root is None:
        raise FileNotFoundError("set data_paths.root or FEDSKIP_DATA_DIR for UCI-HAR")
    if not (root / "train" / "X_train.txt").is_file():
        raise FileNotFoundError(f"no train/X_train.txt under {root}")
    return {"root": root}


def load_data(cfg: ExperimentConfig):
    """(train, test) for the configured dataset, after any subsampling."""
    if cfg.dataset == "synthetic":
        s = cfg.synthetic
        # train and test share class means; only the noise draws differ
        full = ds.make_synthetic(s.n_train + s.n_test, s.num_classes, s.dim, cfg.seed)
        train = full.subset(range(s.n_train))
        test = full.subset(range(s.n_train, s.n_train + s.n_test))
    elif cfg.dataset == "mnist":
        p = resolve_data_paths(cfg)
        train, test = ds.load_mnist(p["train_images"], p["train_labels"],
                                    p["test_images"], p["test_labels"])
    else:
        train, test = ds.load_ucihar(resolve_data_paths(cfg)["root"])
    if cfg.train_subsample:
        train = train.subsample(cfg.train_subsample, cfg.seed)
    if cfg.eval_subsample:
        test = test.subsample(cfg.eval_subsample, cfg.seed + 1)
    return train, test


def initial_model(cfg: ExperimentConfig, train):
    if cfg.dataset == "mnist":
        return build_model(Arch.MNIST_CNN, cfg.seed, image_shape=train.feature_shape,
                           num_classes=train.num_classes)
    return build_model(Arch.HAR_MLP, cfg.seed, input_dim=train.feature_shape[0],
                       num_classes=train.num_classes)


# ---------------------------------------------------------------------------
# output


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rounds_csv(logs: list[RoundLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUNDS_COLUMNS)
    for lg in logs:
        for r in lg.per_client:
            w.writerow([lg.round_index, r.client_id, r.decision.value, _num(r.predicted_magnitude),
                        _num(r.uncertainty), _num(r.actual_norm), r.bytes_up, r.bytes_down,
                        _num(lg.global_accuracy), _num(lg.global_loss)])
    return buf.getvalue()


def curves_csv(logs: list[RoundLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVES_COLUMNS)
    for lg in logs:
        w.writerow([lg.round_index, _num(lg.global_accuracy), _num(lg.cumulative_bytes / MB),
                    _num(lg.skip_rate)])
    return buf.getvalue()


def _write_text(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def checkpoint_dict(result) -> dict:
    params = result.state.params
    return {
        "params": params.values.tolist(),
        "layout": [{"kind": e.spec.kind.value, "dims": list(e.spec.dims), "offset": e.offset,
                    "length": e.length} for e in params.layout],
        "twins": {str(cid): t.to_dict() for cid, t in sorted(result.state.twins.items())},
    }


def run(cfg: ExperimentConfig, out_dir=None, data=None) -> dict:
    """Run one strategy and write its output files. Returns the summary."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    train, test = data if data is not None else load_data(cfg)
    partition = ds.dirichlet_partition(train, cfg.n_clients, cfg.alpha, cfg.seed)
    params = initial_model(cfg, train)

    def progress(lg):
        log.info("%s round %d: acc=%.4f skip=%.2f cum_mb=%.3f", cfg.strategy, lg.round_index,
                 lg.global_accuracy, lg.skip_rate, lg.cumulative_bytes / MB)

    result = run_experiment(cfg.strategy_obj(), partition, test, cfg.train_config(), cfg.rounds,
                            params, cfg.twin, threads=cfg.threads, seed=cfg.seed,
                            on_round=progress)
    summary = dict(result.summary)
    summary.update({
        "strategy": cfg.strategy,
        "payload_bytes": 4 * len(params),
        "wall_time_seconds": time.perf_counter() - started,
        "config_hash": cfg.config_hash(),
        "config_echo": cfg.to_dict(),
    })
    _write_text(out / "rounds.csv", rounds_csv(result.logs))
    _write_text(out / "curves.csv", curves_csv(result.logs))
    _write_text(out / "summary.json", json.dumps(summary, indent=2, default=str) + "\n")
    if cfg.checkpoint:
        _write_text(out / "checkpoint.json", json.dumps(checkpoint_dict(result)) + "\n")
    return summary


def reduction_percent(baseline_bytes: int, other_bytes: int) -> float:
    if baseline_bytes == 0:
        return 0.0
    return 100.0 * (1.0 - other_bytes / baseline_bytes)


def compare(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Run FedAvg and FedSkipTwin with identical seeds and data."""
    out = Path(out_dir or cfg.output_dir)
    data = load_data(cfg)
    summaries = {}
    for name in STRATEGIES:
        summaries[name] = run(cfg.with_(strategy=name), out / name, data=data)
    avg, skip = summaries[Strategy.FEDAVG], summaries[Strategy.FEDSKIPTWIN]
    report = {
        "rows": [
            {"strategy": name, "accuracy": s["final_accuracy"], "total_mb": s["total_mb"],
             "total_bytes": s["total_bytes"], "mean_skip_rate": s["mean_skip_rate"],
             "reduction_percent": reduction_percent(avg["total_bytes"], s["total_bytes"]),
             "config_hash": s["config_hash"]}
            for name, s in summaries.items()
        ],
        "reduction_percent": reduction_percent(avg["total_bytes"], skip["total_bytes"]),
        "accuracy_delta_pp": 100.0 * (skip["final_accuracy"] - avg["final_accuracy"]),
        "paired": avg["config_hash"] == skip["config_hash"],
    }
    _write_text(out / "comparison.json", json.dumps(report, indent=2) + "\n")
    _write_text(out / "comparison.md", format_report(report))
    return report


def format_report(report: dict) -> str:
    lines = ["| strategy | accuracy | communication (MB) | reduction (%) |",
             "|---|---|---|---|"]
    for row in report["rows"]:
        lines.append(f"| {row['strategy']} | {row['accuracy']:.4f} | {row['total_mb']:.2f} | "
                     f"{row['reduction_percent']:.1f} |")
    return "\n".join(lines) + "\n"
