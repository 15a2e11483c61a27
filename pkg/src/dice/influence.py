"""Influence of a node's update on evaluation loss across the network.

Sign convention throughout: an influence is a change in (q-weighted) evaluation
loss caused by keeping the update, so a negative value means the data helped.

Ground truth (``dice_gt``) replays training with the update removed and
compares losses. The estimators (``dice_e_*``) are first-order: they dot
evaluation gradients with the displacement ``delta = theta^{t+1/2} - theta^t``
after carrying it along gossip weights and ``(I - eta H)`` curvature factors.
For SGD ``delta = -eta * grad``, so a test gradient aligned with the training
gradient gives a negative (helpful) score.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .data import EvalSet, NodeDataset
from .engine import (
    RemovalSpec,
    TrainConfig,
    TrainingTrace,
    counterfactual_branch,
    factual_window,
    run_training,
    single_sample_removal_update,
)
from .topology import DEFAULT_PATH_CAP, MixingMatrix, PathBudgetExceeded, Topology, count_walks

RECIPROCITY_EPS = 1e-12


class InfluenceRangeError(ValueError):
    pass


class ComparabilityError(ValueError):
    pass


class AggregationError(ValueError):
    pass


class UndefinedRatio(ArithmeticError):
    def __init__(self, numerator: float, denominator: float):
        super().__init__(f"reciprocity denominator {denominator!r} is too close to zero (numerator {numerator!r})")
        self.numerator = numerator
        self.denominator = denominator


class NonNeighborWarning(UserWarning):
    pass


@dataclass(frozen=True)
class InfluenceQuery:
    node: int
    iteration: int
    radius: int = 1
    index: int | None = None  # a single shard sample instead of the whole batch update
    estimator: str = "estimate"

    def __post_init__(self):
        if self.radius < 0:
            raise InfluenceRangeError("radius must be >= 0")
        if self.estimator not in ("gt", "estimate"):
            raise InfluenceRangeError(f"unknown estimator {self.estimator!r}")

    @property
    def removal(self) -> RemovalSpec:
        return RemovalSpec(self.node, self.iteration, self.index)

    def to_json(self) -> dict:
        return {
            "node": self.node,
            "iteration": self.iteration,
            "radius": self.radius,
            "index": self.index,
            "estimator": self.estimator,
        }


@dataclass
class InfluenceReport:
    query: InfluenceQuery
    per_hop: list[float]
    per_node: dict[int, float]
    per_sample: dict[int, float] | None = None
    total: float = field(init=False)

    def __post_init__(self):
        self.total = float(sum(self.per_hop))

    def to_json(self) -> dict:
        return {
            "query": self.query.to_json(),
            "total": self.total,
            "per_hop": list(self.per_hop),
            "per_node": {str(k): v for k, v in sorted(self.per_node.items())},
            "per_sample": None
            if self.per_sample is None
            else {str(k): v for k, v in sorted(self.per_sample.items())},
        }

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        jpath = stem.with_suffix(".json")
        cpath = stem.with_suffix(".csv")
        jpath.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        with open(cpath, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["kind", "id", "contribution"])
            for k, v in sorted(self.per_node.items()):
                w.writerow(["node", k, repr(v)])
            for i, v in sorted((self.per_sample or {}).items()):
                w.writerow(["sample", i, repr(v)])
        return jpath, cpath


class _EvalCache:
    """Evaluation loss and gradient keyed by (iteration, node, tag)."""

    def __init__(self, m: M.ModelSpec, ev: EvalSet):
        self.m = m
        self.batch = ev.batch()
        self._grads: dict = {}

    def loss(self, theta) -> float:
        return M.loss(self.m, theta, self.batch)

    def grad(self, key, theta) -> np.ndarray:
        g = self._grads.get(key)
        if g is None:
            g = self._grads[key] = M.gradient(self.m, theta, self.batch)
        return g


def _check_range(trace: TrainingTrace, q: InfluenceQuery, horizon: int) -> None:
    if not 0 <= q.node < trace.n:
        raise InfluenceRangeError(f"node {q.node} outside [0, {trace.n})")
    if not 0 <= q.iteration < trace.T:
        raise InfluenceRangeError(f"iteration {q.iteration} outside [0, {trace.T})")
    if q.iteration + horizon > trace.T:
        raise InfluenceRangeError(
            f"iteration {q.iteration} + radius {horizon} runs past the trace length {trace.T}"
        )


def walk_reach(topo: Topology, j: int, s: int) -> list[int]:
    """Nodes at the end of some length-``s`` out-neighbor walk from ``j``."""
    cur = {j}
    for _ in range(s):
        cur = {v for u in cur for v in topo.out_neighbors(u)}
    return sorted(cur)


def removed_displacement(trace: TrainingTrace, q: InfluenceQuery) -> np.ndarray:
    """``theta_j^{t+1/2}`` minus its counterfactual: the step the removal undoes."""
    j, t = q.node, q.iteration
    theta_j = trace.theta(t)[j]
    full = M.sgd_displacement(trace.model, theta_j, trace.batch(j, t), float(trace.etas[t]))
    if q.index is None:
        return full
    return (theta_j + full) - single_sample_removal_update(trace, j, t, q.index)


def sample_displacements(trace: TrainingTrace, j: int, t: int) -> dict[int, np.ndarray]:
    """Additive split of the batch step: ``-eta * grad(z_i) / |B|`` per batch sample."""
    idx = trace.batches[t, j]
    theta_j = trace.theta(t)[j]
    eta = float(trace.etas[t])
    shard = trace.shards[j]
    return {
        int(i): -eta * M.gradient(trace.model, theta_j, shard.batch([i])) / len(idx)
        for i in idx
    }


# -- ground truth -----------------------------------------------------------


def dice_gt(trace: TrainingTrace, query: InfluenceQuery, ev: EvalSet) -> InfluenceReport:
    """Counterfactual influence up to ``query.radius`` hops.

    Hop 0 is the direct loss change at ``j``. Hop ``s`` sums, over every node
    a length-``s`` walk from ``j`` can reach (``j`` included through its
    self-loop), the q-weighted loss gap between the factual and the
    counterfactual ``theta^{t+s}``.
    """
    r = query.radius
    _check_range(trace, query, r)
    j, t = query.node, query.iteration
    q = trace.q
    ec = _EvalCache(trace.model, ev)
    factual = factual_window(trace, t, r)
    branch = counterfactual_branch(trace, query.removal, r)

    theta_j = factual[0][j]
    half_j = trace.half_step(t, j, theta_j)
    cf_half_j = branch.half[j]
    direct = 0.0
    if not np.array_equal(half_j, cf_half_j):
        direct = q[j] * (ec.loss(half_j) - ec.loss(cf_half_j))
    per_hop = [float(direct)]
    per_node = {j: float(direct)}
    for s in range(1, r + 1):
        hop = 0.0
        for k in walk_reach(trace.topology, j, s):
            a, b = factual[s][k], branch.thetas[s][k]
            gap = 0.0 if np.array_equal(a, b) else q[k] * (ec.loss(a) - ec.loss(b))
            hop += gap
            per_node[k] = per_node.get(k, 0.0) + float(gap)
        per_hop.append(float(hop))
    return InfluenceReport(query, per_hop, per_node)


def loo_influence(trace_full: TrainingTrace, trace_without: TrainingTrace, ev: EvalSet) -> float:
    """Leave-one-out influence: q-weighted eval loss at the end of training, full minus reduced."""
    a, b = trace_full, trace_without
    same = (
        a.model == b.model
        and a.T == b.T
        and np.array_equal(a.etas, b.etas)
        and a.config.seed == b.config.seed
        and a.config.batch_size == b.config.batch_size
        and a.topology == b.topology
        and len(a.matrices) == len(b.matrices)
        and all(np.array_equal(x, y) for x, y in zip(a.matrices, b.matrices))
        and np.array_equal(a.q, b.q)
    )
    if not same:
        raise ComparabilityError("LOO runs differ in model, schedule, seed, topology or weights")
    ec = _EvalCache(a.model, ev)
    q = a.q
    return float(sum(q[k] * (ec.loss(a.final[k]) - ec.loss(b.final[k])) for k in range(a.n)))


def centralized_loo(
    m: M.ModelSpec, shard: NodeDataset, cfg: TrainConfig, remove: int, ev: EvalSet, init=None
) -> float:
    """Single-node LOO harness: train on the shard with and without sample ``remove``."""
    from dataclasses import replace

    topo = Topology(1, frozenset({(0, 0)}))
    w = MixingMatrix(np.ones((1, 1)))
    keep = np.delete(np.arange(len(shard)), remove)
    reduced = replace(shard, x=shard.x[keep], y=shard.y[keep], ids=None)
    full = run_training(cfg, topo, w, [shard], m, init=init)
    without = run_training(cfg, topo, w, [reduced], m, init=init)
    return loo_influence(full, without, ev)


# -- estimators ---------------------------------------------------------------


def _one_hop_terms(trace, j, t, delta, ec, theta_t, theta_t1):
    """Direct term and per-receiver one-hop terms for displacement ``delta``."""
    q = trace.q
    w = trace.W(t)
    direct = q[j] * float(ec.grad((t, j), theta_t[j]) @ delta)
    terms = {}
    for k in trace.topology.out_neighbors(j):
        if w[k, j] > 0:
            terms[k] = q[k] * w[k, j] * float(ec.grad((t + 1, k), theta_t1[k]) @ delta)
    return direct, terms


def _one_hop_report(query, direct, terms, j) -> InfluenceReport:
    hop1 = 0.0
    per_node = {j: direct}
    for k, v in terms.items():
        hop1 += v
        per_node[k] = per_node.get(k, 0.0) + v
    return InfluenceReport(query, [direct, hop1], per_node)


def dice_e_one_hop(
    trace: TrainingTrace, query: InfluenceQuery, ev: EvalSet, per_sample: bool = True
) -> InfluenceReport:
    """First-order one-hop estimate; ``per_sample`` splits it additively over the batch."""
    _check_range(trace, query, 1)
    j, t = query.node, query.iteration
    ec = _EvalCache(trace.model, ev)
    window = factual_window(trace, t, 1)
    delta = removed_displacement(trace, query)
    direct, terms = _one_hop_terms(trace, j, t, delta, ec, window[0], window[1])
    rep = _one_hop_report(query, direct, terms, j)
    if per_sample and query.index is None:
        rep.per_sample = {}
        for i, d_i in sample_displacements(trace, j, t).items():
            di, ti = _one_hop_terms(trace, j, t, d_i, ec, window[0], window[1])
            rep.per_sample[i] = float(sum([di, *ti.values()]))
    return rep


def dice_e_one_hop_sample(trace: TrainingTrace, j: int, t: int, index: int, ev: EvalSet) -> InfluenceReport:
    """One-hop estimate for one batch sample's additive share of the update."""
    query = InfluenceQuery(j, t, 1, index)
    _check_range(trace, query, 1)
    ec = _EvalCache(trace.model, ev)
    window = factual_window(trace, t, 1)
    d_i = sample_displacements(trace, j, t).get(int(index))
    if d_i is None:
        raise InfluenceRangeError(f"sample {index} is not in node {j}'s batch at iteration {t}")
    direct, terms = _one_hop_terms(trace, j, t, d_i, ec, window[0], window[1])
    return _one_hop_report(query, direct, terms, j)


def dice_e_batch_additivity(reports: Sequence[InfluenceReport]) -> InfluenceReport:
    """Sum per-sample reports from one ``(node, iteration)`` into a batch report."""
    if not reports:
        raise AggregationError("no reports to aggregate")
    first = reports[0].query
    for r in reports:
        if (r.query.node, r.query.iteration, r.query.radius) != (first.node, first.iteration, first.radius):
            raise AggregationError("reports come from different (node, iteration, radius) queries")
    hops = max(len(r.per_hop) for r in reports)
    per_hop = [0.0] * hops
    per_node: dict[int, float] = {}
    per_sample = {}
    for r in reports:
        for h, v in enumerate(r.per_hop):
            per_hop[h] += v
        for k, v in r.per_node.items():
            per_node[k] = per_node.get(k, 0.0) + v
        if r.query.index is not None:
            per_sample[r.query.index] = r.total
    query = InfluenceQuery(first.node, first.iteration, first.radius)
    return InfluenceReport(query, per_hop, per_node, per_sample or None)


def _curvature_step(trace: TrainingTrace, theta, k: int, s: int, v: np.ndarray) -> np.ndarray:
    """``(I - eta^s H(theta_k^s; z_k^s)) v``."""
    return v - float(trace.etas[s]) * M.hvp(trace.model, theta, trace.batch(k, s), v)


def dice_e_two_hop(trace: TrainingTrace, query: InfluenceQuery, ev: EvalSet) -> InfluenceReport:
    """One-hop estimate plus the explicit two-hop correction through every intermediate node."""
    _check_range(trace, query, 2)
    j, t = query.node, query.iteration
    q = trace.q
    ec = _EvalCache(trace.model, ev)
    window = factual_window(trace, t, 2)
    delta = removed_displacement(trace, query)
    direct, terms = _one_hop_terms(trace, j, t, delta, ec, window[0], window[1])
    rep = _one_hop_report(query, direct, terms, j)
    w0, w1 = trace.W(t), trace.W(t + 1)
    hop2 = 0.0
    for k in trace.topology.out_neighbors(j):
        if w0[k, j] == 0:
            continue
        bent = _curvature_step(trace, window[1][k], k, t + 1, delta)
        for l in trace.topology.out_neighbors(k):
            if w1[l, k] == 0:
                continue
            v = q[l] * w1[l, k] * w0[k, j] * float(ec.grad((t + 2, l), window[2][l]) @ bent)
            hop2 += v
            rep.per_node[l] = rep.per_node.get(l, 0.0) + v
    rep.per_hop.append(hop2)
    rep.total = float(sum(rep.per_hop))
    return rep


def dice_e_r_hop(
    trace: TrainingTrace, query: InfluenceQuery, ev: EvalSet, path_cap: int = DEFAULT_PATH_CAP
) -> InfluenceReport:
    """Walk-sum estimate over all out-neighbor walks of length ``0 .. r``.

    Walks are visited depth-first in lexicographic order. A walk's vector is
    shared by all its extensions, so each distinct prefix costs one HVP.
    """
    r = query.radius
    _check_range(trace, query, r)
    j, t = query.node, query.iteration
    topo = trace.topology
    total_paths = sum(count_walks(topo, j, rho) for rho in range(r + 1))
    if total_paths > path_cap:
        raise PathBudgetExceeded(total_paths, path_cap)
    q = trace.q
    ec = _EvalCache(trace.model, ev)
    window = factual_window(trace, t, r)
    delta = removed_displacement(trace, query)
    outs = [topo.out_neighbors(u) for u in range(topo.n)]

    per_hop = [0.0] * (r + 1)
    per_node: dict[int, float] = {}
    direct = q[j] * float(ec.grad((t, j), window[0][j]) @ delta)
    per_hop[0] = direct
    per_node[j] = direct

    # stack entries: (last node, depth, weight product, propagated vector)
    def visit(k, rho, weight, vec):
        val = q[k] * weight * float(ec.grad((t + rho, k), window[rho][k]) @ vec)
        per_hop[rho] += val
        per_node[k] = per_node.get(k, 0.0) + val
        if rho == r:
            return
        w = trace.W(t + rho)
        nxt = None
        for v in outs[k]:
            if w[v, k] == 0:
                continue
            if nxt is None:
                nxt = _curvature_step(trace, window[rho][k], k, t + rho, vec)
            visit(v, rho + 1, weight * w[v, k], nxt)

    if r >= 1:
        w = trace.W(t)
        for k in outs[j]:
            if w[k, j] > 0:
                visit(k, 1, w[k, j], delta)
    return InfluenceReport(query, per_hop, per_node)


def estimate(trace: TrainingTrace, query: InfluenceQuery, ev: EvalSet, path_cap: int = DEFAULT_PATH_CAP):
    """Dispatch on ``query.estimator``."""
    if query.estimator == "gt":
        return dice_gt(trace, query, ev)
    if query.radius == 0:
        return dice_e_r_hop(trace, query, ev, path_cap)
    if query.radius == 1:
        return dice_e_one_hop(trace, query, ev)
    return dice_e_r_hop(trace, query, ev, path_cap)


# -- peer-level quantities ------------------------------------------------------


def _train_grad(trace: TrainingTrace, k: int, t: int) -> np.ndarray:
    return M.gradient(trace.model, trace.theta(t)[k], trace.batch(k, t))


def proximal_influence(trace: TrainingTrace, j: int, k: int, t: int, ev: EvalSet) -> float:
    """One-hop influence of node ``j``'s batch at ``t`` attributed to receiver ``k``."""
    if not 0 <= t < trace.T:
        raise InfluenceRangeError(f"iteration {t} outside [0, {trace.T})")
    w = trace.W(t)[k, j]
    if w == 0:
        warnings.warn(f"node {k} does not receive from node {j} at iteration {t}", NonNeighborWarning)
        return 0.0
    ec = _EvalCache(trace.model, ev)
    g_test = ec.grad((t + 1, k), trace.theta(t + 1)[k])
    return float(-trace.etas[t] * w * trace.q[k] * (_train_grad(trace, j, t) @ g_test))


def _checked_ratio(num: float, den: float) -> float:
    if abs(den) <= RECIPROCITY_EPS:
        raise UndefinedRatio(num, den)
    return num / den


def reciprocity_proximal(trace: TrainingTrace, j: int, k: int, t: int, ev: EvalSet) -> float:
    """Influence ``j -> k`` over influence ``k -> j`` at iteration ``t``.

    Each side pairs the sender's own training gradient with the receiver's
    evaluation gradient after gossip.
    """
    if j == k:
        raise ValueError("reciprocity needs two distinct nodes")
    q, w = trace.q, trace.W(t)
    ec = _EvalCache(trace.model, ev)
    th1 = trace.theta(t + 1)
    num = q[k] * w[k, j] * float(ec.grad((t + 1, k), th1[k]) @ _train_grad(trace, j, t))
    den = q[j] * w[j, k] * float(ec.grad((t + 1, j), th1[j]) @ _train_grad(trace, k, t))
    return _checked_ratio(num, den)


def reciprocity_neighborhood(trace: TrainingTrace, j: int, t: int, ev: EvalSet) -> float:
    """Total outflow of ``j``'s influence to its receivers over total inflow from its senders."""
    q, w = trace.q, trace.W(t)
    ec = _EvalCache(trace.model, ev)
    th1 = trace.theta(t + 1)
    g_j = _train_grad(trace, j, t)
    num = 0.0
    for k in trace.topology.out_neighbors(j, include_self=False):
        num += q[k] * w[k, j] * float(ec.grad((t + 1, k), th1[k]) @ g_j)
    den = 0.0
    g_test_j = ec.grad((t + 1, j), th1[j])
    for l in trace.topology.in_neighbors(j, include_self=False):
        den += q[j] * w[j, l] * float(g_test_j @ _train_grad(trace, l, t))
    return _checked_ratio(num, den)
