"""Decentralized SGD with gossip averaging, replayable traces and counterfactual branches.

Each round is adapt-then-communicate: every node takes one local SGD step on
its sampled batch, then every node replaces its parameters with the
``W[k, :]``-weighted average of the half-step parameters.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .data import CorruptionTag, EvalSet, NodeDataset, RngStream, load_csv, sample_batch, save_csv
from .topology import MixingMatrix, Topology, load_mixing, save_mixing

TRACE_FORMAT = "dice-trace/1"


class DivergenceError(FloatingPointError):
    def __init__(self, t: int, k: int):
        super().__init__(f"non-finite parameters at iteration {t}, node {k}")
        self.t = t
        self.k = k


class ReplayError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    rounds: int
    lr: float | tuple[float, ...] = 0.1
    batch_size: int = 16
    seed: int = 0
    q: tuple[float, ...] | None = None
    snapshot_policy: str = "all"
    snapshot_iterations: tuple[int, ...] = ()
    shared_init: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if isinstance(self.lr, (list, tuple)):
            object.__setattr__(self, "lr", tuple(float(x) for x in self.lr))
            if len(self.lr) < self.rounds:
                raise ConfigError(f"lr schedule has {len(self.lr)} entries for {self.rounds} rounds")
        if any(e <= 0 for e in self.etas()):
            raise ConfigError("step sizes must be positive")
        if self.q is not None:
            q = tuple(float(x) for x in self.q)
            object.__setattr__(self, "q", q)
            if min(q) < 0 or abs(sum(q) - 1.0) > 1e-9:
                raise ConfigError("q must be non-negative and sum to 1")
        if self.snapshot_policy not in ("all", "queried"):
            raise ConfigError(f"unknown snapshot policy {self.snapshot_policy!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        object.__setattr__(self, "snapshot_iterations", tuple(int(t) for t in self.snapshot_iterations))

    def etas(self) -> np.ndarray:
        if isinstance(self.lr, tuple):
            return np.array(self.lr[: self.rounds])
        return np.full(self.rounds, float(self.lr))

    def weights(self, n: int) -> np.ndarray:
        if self.q is None:
            return np.full(n, 1.0 / n)
        if len(self.q) != n:
            raise ConfigError(f"q has {len(self.q)} entries for {n} nodes")
        return np.array(self.q)

    def to_json(self) -> dict:
        out = asdict(self)
        for key in ("lr", "q", "snapshot_iterations"):
            if isinstance(out[key], tuple):
                out[key] = list(out[key])
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        for key in ("lr", "q", "snapshot_iterations"):
            if isinstance(obj.get(key), list):
                obj[key] = tuple(obj[key])
        return cls(**obj)


def resolve_workers(requested: int) -> int:
    env = os.environ.get("DICE_THREADS")
    if env:
        return max(1, int(env))
    return max(1, int(requested))


@dataclass(frozen=True)
class RemovalSpec:
    node: int
    iteration: int
    index: int | None = None  # shard index of a single removed sample; None removes the update

    @property
    def whole_update(self) -> bool:
        return self.index is None


@dataclass
class TrainingTrace:
    model: M.ModelSpec
    config: TrainConfig
    topology: Topology
    matrices: list[np.ndarray]
    mixing_index: np.ndarray
    etas: np.ndarray
    batches: np.ndarray  # (T, n, B) shard indices
    shards: list[NodeDataset]
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.topology.n

    @property
    def T(self) -> int:
        return len(self.etas)

    @property
    def q(self) -> np.ndarray:
        return self.config.weights(self.n)

    def W(self, t: int) -> np.ndarray:
        return self.matrices[int(self.mixing_index[t])]

    def batch(self, k: int, t: int) -> M.Batch:
        return self.shards[k].batch(self.batches[t, k])

    @property
    def final(self) -> np.ndarray:
        return self.snapshots[self.T]

    def theta(self, t: int) -> np.ndarray:
        """Pre-update parameters ``theta^t`` of all nodes, replaying from the nearest snapshot."""
        if not 0 <= t <= self.T:
            raise ReplayError(f"iteration {t} outside [0, {self.T}]")
        if t in self.snapshots:
            return self.snapshots[t]
        base = max(s for s in self.snapshots if s <= t)
        theta = self.snapshots[base]
        for s in range(base, t):
            theta = gossip(self.W(s), local_updates(self, s, theta))
        return theta

    def half_step(self, t: int, k: int, theta_k: np.ndarray | None = None) -> np.ndarray:
        th = self.theta(t)[k] if theta_k is None else theta_k
        return th + M.sgd_displacement(self.model, th, self.batch(k, t), float(self.etas[t]))


def gossip(w: np.ndarray, half: np.ndarray) -> np.ndarray:
    """``out[k] = sum_j w[k, j] * half[j]`` accumulated in ascending ``j``, zeros skipped."""
    out = np.zeros_like(half)
    for k in range(w.shape[0]):
        acc = out[k]
        for j in np.flatnonzero(w[k]):
            acc += w[k, j] * half[j]
    return out


def local_updates(trace: TrainingTrace, t: int, theta: np.ndarray, pool=None) -> np.ndarray:
    eta = float(trace.etas[t])

    def step(k):
        return theta[k] + M.sgd_displacement(trace.model, theta[k], trace.batch(k, t), eta)

    ks = range(trace.n)
    rows = list(pool.map(step, ks)) if pool is not None else [step(k) for k in ks]
    half = np.stack(rows)
    for k in range(trace.n):
        if not np.all(np.isfinite(half[k])):
            raise DivergenceError(t, k)
    return half


def batch_schedule(shards: Sequence[NodeDataset], cfg: TrainConfig) -> np.ndarray:
    """Epoch-wise without-replacement batches; partial trailing batches are dropped."""
    n = len(shards)
    out = np.empty((cfg.rounds, n, cfg.batch_size), dtype=np.int64)
    root = RngStream(cfg.seed)
    for k, shard in enumerate(shards):
        per_epoch = len(shard) // cfg.batch_size
        if per_epoch == 0:
            raise ConfigError(f"node {k} has {len(shard)} samples, fewer than batch_size {cfg.batch_size}")
        perm = None
        for t in range(cfg.rounds):
            epoch, slot = divmod(t, per_epoch)
            if slot == 0:
                _, perm = sample_batch(shard, len(shard), root.child("batch", k, epoch))
            out[t, k] = perm[slot * cfg.batch_size : (slot + 1) * cfg.batch_size]
    return out


def initial_params(m: M.ModelSpec, n: int, cfg: TrainConfig) -> np.ndarray:
    root = RngStream(cfg.seed).child("init")
    if cfg.shared_init:
        theta0 = M.init_params(m, root.generator())
        return np.tile(theta0, (n, 1))
    return np.stack([M.init_params(m, root.child(k).generator()) for k in range(n)])


def _mixing_sequence(mixing, rounds: int):
    if isinstance(mixing, (MixingMatrix, np.ndarray)):
        mixing = [mixing]
        index = np.zeros(rounds, dtype=np.int64)
    else:
        mixing = list(mixing)
        if len(mixing) < rounds:
            raise ConfigError(f"mixing sequence has {len(mixing)} matrices for {rounds} rounds")
        mixing = mixing[:rounds]
        index = np.arange(rounds, dtype=np.int64)
    mats = [np.array(w.entries if isinstance(w, MixingMatrix) else w, dtype=np.float64) for w in mixing]
    return mats, index


def run_training(
    cfg: TrainConfig,
    topology: Topology,
    mixing,
    shards: Sequence[NodeDataset],
    model: M.ModelSpec,
    init: np.ndarray | None = None,
) -> TrainingTrace:
    """Run decentralized SGD and record a trace sufficient for exact replay.

    ``mixing`` is one matrix used every round or a per-round sequence.
    """
    n = topology.n
    if len(shards) != n:
        raise ConfigError(f"{len(shards)} shards for {n} nodes")
    for s in shards:
        if s.x.shape[1] != model.n_in:
            raise ConfigError(f"node {s.node} features have width {s.x.shape[1]}, model expects {model.n_in}")
    mats, index = _mixing_sequence(mixing, cfg.rounds)
    for w in mats:
        if w.shape != (n, n):
            raise ConfigError(f"mixing matrix shape {w.shape} does not match {n} nodes")
    cfg.weights(n)
    theta = initial_params(model, n, cfg) if init is None else np.array(init, dtype=np.float64)
    if theta.shape != (n, model.d):
        raise ConfigError(f"initial parameters have shape {theta.shape}, need {(n, model.d)}")

    trace = TrainingTrace(
        model=model,
        config=cfg,
        topology=topology,
        matrices=mats,
        mixing_index=index,
        etas=cfg.etas(),
        batches=batch_schedule(shards, cfg),
        shards=list(shards),
    )
    keep = set(range(cfg.rounds + 1)) if cfg.snapshot_policy == "all" else set(cfg.snapshot_iterations)
    keep |= {0, cfg.rounds}
    workers = resolve_workers(cfg.workers)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for t in range(cfg.rounds):
            if t in keep:
                trace.snapshots[t] = theta
            half = local_updates(trace, t, theta, pool)
            theta = gossip(trace.W(t), half)
    finally:
        if pool is not None:
            pool.shutdown()
    trace.snapshots[cfg.rounds] = theta
    for arr in trace.snapshots.values():
        arr.setflags(write=False)
    return trace


def single_sample_removal_update(trace: TrainingTrace, j: int, t: int, index: int) -> np.ndarray:
    """``theta_j^{t+1/2}`` recomputed with shard sample ``index`` dropped from the batch."""
    idx = trace.batches[t, j]
    pos = np.flatnonzero(idx == index)
    if len(pos) == 0:
        raise ReplayError(f"sample {index} is not in node {j}'s batch at iteration {t}")
    theta_j = trace.theta(t)[j]
    rest = np.delete(idx, pos[0])
    if len(rest) == 0:
        return theta_j.copy()
    batch = trace.shards[j].batch(rest)
    return theta_j + M.sgd_displacement(trace.model, theta_j, batch, float(trace.etas[t]))


@dataclass
class Branch:
    """Counterfactual trajectory; ``thetas[s]`` holds ``theta^{t+s}`` of all nodes."""

    removal: RemovalSpec
    half: np.ndarray  # theta^{t+1/2} of all nodes with the removal applied
    thetas: np.ndarray


def counterfactual_branch(trace: TrainingTrace, removal: RemovalSpec, horizon: int) -> Branch:
    """Replay ``t .. t + horizon`` with node ``j``'s update at ``t`` removed.

    Batches, matrices and step sizes are taken from the trace. The removed
    node keeps training afterwards.
    """
    t, j = removal.iteration, removal.node
    if not 0 <= t < trace.T:
        raise ReplayError(f"removal iteration {t} outside [0, {trace.T})")
    if t + horizon > trace.T:
        raise ReplayError(f"horizon {t} + {horizon} exceeds the trace length {trace.T}")
    theta = trace.theta(t)
    half = local_updates(trace, t, theta)
    if removal.whole_update:
        half[j] = theta[j]
    else:
        half[j] = single_sample_removal_update(trace, j, t, removal.index)
    thetas = [theta]
    if horizon >= 1:
        cur = gossip(trace.W(t), half)
        thetas.append(cur)
        for s in range(t + 1, t + horizon):
            cur = gossip(trace.W(s), local_updates(trace, s, cur))
            thetas.append(cur)
    return Branch(removal, half, np.stack(thetas))


def factual_window(trace: TrainingTrace, t: int, horizon: int) -> np.ndarray:
    """Factual ``theta^{t+s}`` for ``s = 0 .. horizon``, shape ``(horizon + 1, n, d)``."""
    if t + horizon > trace.T:
        raise ReplayError(f"horizon {t} + {horizon} exceeds the trace length {trace.T}")
    out = [trace.theta(t)]
    for s in range(t, t + horizon):
        nxt = trace.snapshots.get(s + 1)
        if nxt is None:
            nxt = gossip(trace.W(s), local_updates(trace, s, out[-1]))
        out.append(nxt)
    return np.stack(out)


# -- export / import -------------------------------------------------------


def _write_params(path: Path, arr: np.ndarray, m: M.ModelSpec) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    sidecar = {"d": m.d, "model_kind": m.kind, "rows": int(arr.shape[0])}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))


def _read_params(path: Path) -> np.ndarray:
    meta = json.loads(path.with_suffix(".json").read_text())
    return np.frombuffer(path.read_bytes(), dtype="<f8").reshape(meta["rows"], meta["d"]).astype(np.float64)


def export_trace(trace: TrainingTrace, out: str | Path, ev: EvalSet | None = None) -> Path:
    """Write a self-contained trace directory; returns the manifest path."""
    out = Path(out)
    for sub in ("params", "mixing", "data"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for i, w in enumerate(trace.matrices):
        save_mixing(w, out / "mixing" / f"W_{i:04d}.txt")
    for k, shard in enumerate(trace.shards):
        save_csv(shard, out / "data" / f"node_{k:04d}.csv")
    if ev is not None:
        save_csv(ev, out / "data" / "eval.csv")
    for t, arr in sorted(trace.snapshots.items()):
        _write_params(out / "params" / f"theta_{t:06d}.bin", arr, trace.model)
    (out / "batches.bin").write_bytes(np.ascontiguousarray(trace.batches, dtype="<i8").tobytes())
    manifest = {
        "format": TRACE_FORMAT,
        "model": trace.model.to_json(),
        # parallelism does not change results, so it is left out of the manifest
        "config": {k: v for k, v in trace.config.to_json().items() if k != "workers"},
        "topology": trace.topology.to_json(),
        "n": trace.n,
        "d": trace.model.d,
        "T": trace.T,
        "etas": [float(e) for e in trace.etas],
        "mixing_files": [f"mixing/W_{i:04d}.txt" for i in range(len(trace.matrices))],
        "mixing_index": trace.mixing_index.tolist(),
        "batches_shape": list(trace.batches.shape),
        "snapshots": sorted(int(t) for t in trace.snapshots),
        "corruption": [{"kind": s.corruption.kind, "params": s.corruption.params} for s in trace.shards],
        "final_hash": hashlib.sha256(np.ascontiguousarray(trace.final, dtype="<f8").tobytes()).hexdigest(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_trace(directory: str | Path) -> TrainingTrace:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    if man.get("format") != TRACE_FORMAT:
        raise ReplayError(f"{d}: unknown trace format {man.get('format')!r}")
    model = M.ModelSpec.from_json(man["model"])
    shards = []
    for k in range(man["n"]):
        s = load_csv(d / "data" / f"node_{k:04d}.csv", node=k)
        c = man["corruption"][k]
        shards.append(NodeDataset(k, s.x, s.y, CorruptionTag(c["kind"], c["params"])))
    mats = [np.array(load_mixing(d / f).entries) for f in man["mixing_files"]]
    batches = np.frombuffer((d / "batches.bin").read_bytes(), dtype="<i8").reshape(man["batches_shape"])
    snaps = {}
    for t in man["snapshots"]:
        arr = _read_params(d / "params" / f"theta_{t:06d}.bin")
        arr.setflags(write=False)
        snaps[t] = arr
    return TrainingTrace(
        model=model,
        config=TrainConfig.from_json(man["config"]),
        topology=Topology.from_json(man["topology"]),
        matrices=mats,
        mixing_index=np.array(man["mixing_index"], dtype=np.int64),
        etas=np.array(man["etas"]),
        batches=batches.astype(np.int64),
        shards=shards,
        snapshots=snaps,
    )


def load_eval(directory: str | Path) -> EvalSet:
    path = Path(directory) / "data" / "eval.csv"
    if not path.exists():
        raise ReplayError(f"{directory}: trace has no evaluation set")
    e = load_csv(path)
    return EvalSet(e.x, e.y)
