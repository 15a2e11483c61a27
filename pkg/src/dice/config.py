"""JSON run configuration: one file declares model, data, topology, training and experiment."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as D
from . import model as M
from . import topology as T
from .engine import ConfigError, TrainConfig


@dataclass(frozen=True)
class AnomalySpec:
    node: int
    kind: str  # "label-flip" or "feature-noise"
    fraction: float = 1.0
    variance: float = 100.0


@dataclass(frozen=True)
class DataSpec:
    source: str = "synthetic"  # "synthetic" or "csv"
    task: str = "classification"  # or "regression"
    per_node: int = 512
    dims: int = 32
    classes: int = 10
    n_eval: int = 256
    separation: float = 3.0
    noise: float = 1.0
    csv_paths: tuple[str, ...] = ()
    eval_csv: str | None = None
    anomalies: tuple[AnomalySpec, ...] = ()


@dataclass(frozen=True)
class TopologySpec:
    builder: str = "ring"  # ring | exponential | fully_connected | file
    n: int = 16
    mixing: str = "uniform"  # uniform | dominant | file
    matrix_file: str | None = None
    dominant: tuple[int, ...] = ()
    dominant_weight: float = 0.5


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str = "alignment"  # alignment | anomaly | cascade | influence-query
    trials: int = 30
    victim: int = 0
    window: tuple[int, ...] | None = None  # [start, stop) iterations; None means all usable
    stems: tuple[int, ...] = ()
    iterations: int = 10
    inject_node: int = 1
    decay_queries: int = 20
    node: int = 0
    iteration: int = 0
    radius: int = 1
    estimator: str = "estimate"
    acceptance: bool = False
    min_pearson: float = 0.9
    min_ratio: float = 2.0


@dataclass(frozen=True)
class RunConfig:
    seed: int
    model: M.ModelSpec
    train: TrainConfig
    data: DataSpec = field(default_factory=DataSpec)
    topology: TopologySpec = field(default_factory=TopologySpec)
    experiment: ExperimentSpec | None = None
    workers: int = 1

    def to_json(self) -> dict:
        train = self.train.to_json()
        train.pop("seed")
        train.pop("workers")
        data = asdict(self.data)
        data["csv_paths"] = list(self.data.csv_paths)
        data["anomalies"] = [asdict(a) for a in self.data.anomalies]
        topo = asdict(self.topology)
        topo["dominant"] = list(self.topology.dominant)
        out = {
            "seed": self.seed,
            "workers": self.workers,
            "model": self.model.to_json(),
            "data": data,
            "topology": topo,
            "train": train,
        }
        if self.experiment is not None:
            exp = asdict(self.experiment)
            exp["stems"] = list(self.experiment.stems)
            exp["window"] = None if self.experiment.window is None else list(self.experiment.window)
            out["experiment"] = exp
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def _build(cls, obj, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls) if f.init}
    extra = set(obj) - known
    if extra:
        raise ConfigError(f"{where}: unknown field(s) {sorted(extra)}")
    try:
        return cls(**obj)
    except ConfigError as e:
        raise ConfigError(f"{where}: {e}") from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def parse_config(obj: dict) -> RunConfig:
    if "seed" not in obj:
        raise ConfigError("seed: required")
    if "model" not in obj:
        raise ConfigError("model: required")
    if "train" not in obj:
        raise ConfigError("train: required")
    seed = obj["seed"]
    if not isinstance(seed, int):
        raise ConfigError("seed: must be an integer")
    workers = int(obj.get("workers", 1))
    model = _build(M.ModelSpec, {**obj["model"], "layer_sizes": tuple(obj["model"].get("layer_sizes", ()))}, "model")

    d = dict(obj.get("data", {}))
    d["csv_paths"] = tuple(d.get("csv_paths", ()))
    d["anomalies"] = tuple(_build(AnomalySpec, a, f"data.anomalies[{i}]") for i, a in enumerate(d.get("anomalies", ())))
    data = _build(DataSpec, d, "data")
    if data.source not in ("synthetic", "csv"):
        raise ConfigError(f"data.source: unknown source {data.source!r}")
    if data.task not in ("classification", "regression"):
        raise ConfigError(f"data.task: unknown task {data.task!r}")
    for a in data.anomalies:
        if a.kind not in (D.LABEL_FLIP, D.FEATURE_NOISE):
            raise ConfigError(f"data.anomalies: unknown kind {a.kind!r}")

    t = dict(obj.get("topology", {}))
    t["dominant"] = tuple(t.get("dominant", ()))
    topo = _build(TopologySpec, t, "topology")
    if topo.builder not in (*T.BUILDERS, "file"):
        raise ConfigError(f"topology.builder: unknown builder {topo.builder!r}")
    if topo.mixing not in ("uniform", "dominant", "file"):
        raise ConfigError(f"topology.mixing: unknown mixing {topo.mixing!r}")
    if "file" in (topo.builder, topo.mixing) and not topo.matrix_file:
        raise ConfigError("topology.matrix_file: required when builder or mixing is 'file'")

    tr = dict(obj["train"])
    for key in ("seed", "workers"):
        if key in tr:
            raise ConfigError(f"train.{key}: set at the top level, not under train")
    for key in ("lr", "q", "snapshot_iterations"):
        if isinstance(tr.get(key), list):
            tr[key] = tuple(tr[key])
    train = _build(TrainConfig, {**tr, "seed": seed, "workers": workers}, "train")

    exp = None
    if obj.get("experiment") is not None:
        e = dict(obj["experiment"])
        e["stems"] = tuple(e.get("stems", ()))
        if e.get("window") is not None:
            e["window"] = tuple(e["window"])
        exp = _build(ExperimentSpec, e, "experiment")
        if exp.kind not in ("alignment", "anomaly", "cascade", "influence-query"):
            raise ConfigError(f"experiment.kind: unknown kind {exp.kind!r}")

    cfg = RunConfig(seed, model, train, data, topo, exp, workers)
    _check_dimensions(cfg)
    return cfg


def _check_dimensions(cfg: RunConfig) -> None:
    if cfg.data.source == "synthetic":
        if cfg.model.n_in != cfg.data.dims:
            raise ConfigError(f"model.layer_sizes: input width {cfg.model.n_in} != data.dims {cfg.data.dims}")
        if cfg.data.task == "classification" and cfg.model.n_out != cfg.data.classes:
            raise ConfigError(f"model.layer_sizes: output width {cfg.model.n_out} != data.classes {cfg.data.classes}")
        if cfg.data.per_node < cfg.train.batch_size:
            raise ConfigError("train.batch_size: larger than data.per_node")
    if cfg.topology.builder != "file" and cfg.train.q is not None and len(cfg.train.q) != cfg.topology.n:
        raise ConfigError(f"train.q: {len(cfg.train.q)} weights for {cfg.topology.n} nodes")


def load_config(path: str | Path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(obj)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    obj = cfg.to_json()
    obj["seed"] = seed
    return parse_config(obj)


def build_topology(cfg: RunConfig, base: Path | None = None):
    """Topology and mixing matrix described by ``cfg.topology``."""
    ts = cfg.topology
    base = base or Path(".")
    w_file = None
    if ts.matrix_file:
        p = Path(ts.matrix_file)
        w_file = T.load_mixing(p if p.is_absolute() else base / p)
    if ts.builder == "file":
        topo = T.Topology.from_matrix(w_file.entries)
    else:
        topo = T.BUILDERS[ts.builder](ts.n)
    if ts.dominant:
        extra = {(k, dnode) for dnode in ts.dominant for k in range(topo.n)}
        topo = T.Topology(topo.n, topo.edges | extra)
    if ts.mixing == "uniform":
        w = T.uniform_mixing(topo)
    elif ts.mixing == "dominant":
        if not ts.dominant:
            raise ConfigError("topology.dominant: required for dominant mixing")
        w = T.dominant_mixing(topo, ts.dominant, ts.dominant_weight)
    else:
        w = w_file
        if w.n != topo.n or not w.support_within(topo):
            raise ConfigError("topology.matrix_file: support does not fit the topology")
    return topo, w


def build_data(cfg: RunConfig, n: int, base: Path | None = None):
    ds = cfg.data
    base = base or Path(".")
    if ds.source == "synthetic":
        if ds.task == "classification":
            shards, ev = D.synth_classification(
                n, ds.per_node, ds.dims, ds.classes, cfg.seed, ds.n_eval, ds.separation, ds.noise
            )
        else:
            shards, ev = D.synth_regression(n, ds.per_node, ds.dims, cfg.seed, ds.n_eval, ds.noise)
    else:
        if len(ds.csv_paths) != n or not ds.eval_csv:
            raise ConfigError(f"data.csv_paths: need {n} shard files and data.eval_csv")
        shards = [D.load_csv(base / p, node=k) for k, p in enumerate(ds.csv_paths)]
        e = D.load_csv(base / ds.eval_csv)
        ev = D.EvalSet(e.x, e.y)
    for a in ds.anomalies:
        if not 0 <= a.node < n:
            raise ConfigError(f"data.anomalies: node {a.node} outside [0, {n})")
        if a.kind == D.LABEL_FLIP:
            classes = ds.classes if ds.task == "classification" else None
            shards[a.node] = D.flip_labels(shards[a.node], a.fraction, cfg.seed, classes=classes)
        else:
            shards[a.node] = D.add_feature_noise(shards[a.node], a.variance, cfg.seed)
    return shards, ev
