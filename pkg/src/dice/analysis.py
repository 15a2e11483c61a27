"""Experiment harnesses built on the influence engine."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import model as M
from .data import EvalSet, RngStream, synth_regression
from .engine import TrainConfig, TrainingTrace, resolve_workers, run_training
from .influence import (
    InfluenceQuery,
    _EvalCache,
    _one_hop_terms,
    dice_e_one_hop,
    dice_e_r_hop,
    dice_gt,
    proximal_influence,
)
from .topology import build_ring, distances_from, uniform_mixing


class StatisticsError(ValueError):
    pass


class HarnessError(ValueError):
    pass


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        raise StatisticsError("correlation undefined for fewer than 2 points or zero variance")
    return float(stats.pearsonr(x, y).statistic)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        raise StatisticsError("correlation undefined for fewer than 2 points or zero variance")
    return float(stats.spearmanr(x, y).statistic)


@dataclass
class AlignmentResult:
    pairs: list[tuple[float, float]]
    queries: list[tuple[int, int]] = field(default_factory=list)
    pearson: float = field(init=False)
    spearman: float = field(init=False)
    mean_abs_gap: float = field(init=False)

    def __post_init__(self):
        if not self.pairs:
            raise StatisticsError("no alignment pairs")
        gt, est = zip(*self.pairs)
        self.pearson = pearson(gt, est)
        self.spearman = spearman(gt, est)
        self.mean_abs_gap = float(np.mean(np.abs(np.subtract(gt, est))))

    def summary(self) -> dict:
        return {
            "trials": len(self.pairs),
            "pearson": self.pearson,
            "spearman": self.spearman,
            "mean_abs_gap": self.mean_abs_gap,
        }

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        with open(out_dir / "alignment.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["node", "iteration", "gt", "estimate"])
            for (j, t), (g, e) in zip(self.queries, self.pairs):
                w.writerow([j, t, repr(g), repr(e)])
        (out_dir / "alignment.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True))


def alignment_schedule(trace: TrainingTrace, trials: int, seed: int) -> list[tuple[int, int]]:
    """One ``(node, iteration)`` per equal-width stratum of ``[0, T - 1)``."""
    if trials < 2:
        raise HarnessError("alignment needs at least 2 trials")
    last = trace.T - 1  # one-hop ground truth needs theta^{t+1}
    if last < 1:
        raise HarnessError("trace too short for alignment")
    edges = np.linspace(0, last, trials + 1)
    rng = RngStream(seed).child("alignment").generator()
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        lo, hi = int(np.floor(a)), max(int(np.floor(a)) + 1, int(np.floor(b)))
        t = int(rng.integers(lo, min(hi, last + 1)))
        j = int(rng.integers(0, trace.n))
        out.append((j, t))
    return out


def run_alignment(
    trace: TrainingTrace, ev: EvalSet, trials: int = 30, seed: int = 0, workers: int = 1
) -> AlignmentResult:
    """One-hop ground truth (whole-update removal) against the one-hop estimate."""
    schedule = alignment_schedule(trace, trials, seed)

    def one(jt):
        j, t = jt
        gt = dice_gt(trace, InfluenceQuery(j, t, 1, estimator="gt"), ev).total
        est = dice_e_one_hop(trace, InfluenceQuery(j, t, 1), ev, per_sample=False).total
        return gt, est

    with ThreadPoolExecutor(resolve_workers(workers)) as pool:
        pairs = list(pool.map(one, schedule))
    return AlignmentResult(pairs, schedule)


def detect_anomaly(
    trace: TrainingTrace, victim: int, ev: EvalSet, window: Iterable[int], workers: int = 1
) -> list[tuple[int, float]]:
    """Senders of ``victim`` ranked by mean proximal influence, most harmful first."""
    window = list(window)
    if not window:
        raise HarnessError("empty iteration window")
    senders = trace.topology.in_neighbors(victim, include_self=False)
    if len(senders) < 2:
        raise HarnessError(f"node {victim} has fewer than 2 senders")

    def score(j):
        return float(np.mean([proximal_influence(trace, j, victim, t, ev) for t in window]))

    with ThreadPoolExecutor(resolve_workers(workers)) as pool:
        scores = list(pool.map(score, senders))
    return sorted(zip(senders, scores), key=lambda p: (-p[1], p[0]))


@dataclass
class CascadeMap:
    stem: int
    iteration: int
    scores: dict[int, float]
    hop_rings: dict[int, int]

    @property
    def total(self) -> float:
        return float(sum(self.scores.values()))

    @property
    def out_influence(self) -> float:
        """Contribution landing on nodes other than the stem."""
        return float(sum(v for k, v in self.scores.items() if k != self.stem))

    def to_json(self) -> dict:
        return {
            "stem": self.stem,
            "iteration": self.iteration,
            "scores": {str(k): v for k, v in sorted(self.scores.items())},
            "hop_rings": {str(k): v for k, v in sorted(self.hop_rings.items())},
        }


def cascade_map(
    trace: TrainingTrace, stem: int, t: int, ev: EvalSet, batch: M.Batch | None = None
) -> CascadeMap:
    """Per-node one-hop estimate for the stem's batch at ``t``.

    ``batch`` injects a fixed batch in place of the recorded one, so the same
    data can be compared across stems. The stem's score is its direct term plus
    its self-loop term.
    """
    if not 0 <= stem < trace.n or not 0 <= t < trace.T:
        raise HarnessError(f"invalid stem/iteration ({stem}, {t})")
    theta_t = trace.theta(t)
    theta_t1 = trace.theta(t + 1)
    b = trace.batch(stem, t) if batch is None else batch
    delta = M.sgd_displacement(trace.model, theta_t[stem], b, float(trace.etas[t]))
    ec = _EvalCache(trace.model, ev)
    direct, terms = _one_hop_terms(trace, stem, t, delta, ec, theta_t, theta_t1)
    scores = {stem: direct}
    for k, v in terms.items():
        scores[k] = scores.get(k, 0.0) + v
    dist = distances_from(trace.topology, stem)
    return CascadeMap(stem, t, scores, {k: dist[k] for k in scores if k in dist})


def hop_profile(trace: TrainingTrace, queries: Sequence[tuple[int, int]], ev: EvalSet, radius: int = 3,
                workers: int = 1) -> np.ndarray:
    """Mean ``|per_hop[rho]|`` of the walk-sum estimate over ``queries``, ``rho = 0 .. radius``."""

    def one(jt):
        return np.abs(dice_e_r_hop(trace, InfluenceQuery(jt[0], jt[1], radius), ev).per_hop)

    with ThreadPoolExecutor(resolve_workers(workers)) as pool:
        rows = list(pool.map(one, queries))
    return np.mean(rows, axis=0)


# -- numerical verification ---------------------------------------------------------


@dataclass
class CheckResult:
    check: str
    model: str
    seed: int
    error: float
    tol: float
    status: str  # "pass", "fail" or "excluded"
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.status != "fail"


def fd_gradient(m: M.ModelSpec, theta: np.ndarray, batch: M.Batch, h: float = 1e-5) -> np.ndarray:
    g = np.empty_like(theta)
    e = np.zeros_like(theta)
    for i in range(len(theta)):
        e[i] = h
        g[i] = (M.loss(m, theta + e, batch) - M.loss(m, theta - e, batch)) / (2 * h)
        e[i] = 0.0
    return g


def gradient_rel_error(g: np.ndarray, fd: np.ndarray) -> float:
    """Max per-coordinate error, each scaled by ``max(|fd_i|, 1e-3 * max|fd|)``.

    The floor keeps near-zero coordinates from turning finite-difference
    rounding noise into a huge ratio.
    """
    scale = np.maximum(np.abs(fd), 1e-3 * np.max(np.abs(fd)) + 1e-12)
    return float(np.max(np.abs(g - fd) / scale))


def fd_hvp(m: M.ModelSpec, theta: np.ndarray, batch: M.Batch, v: np.ndarray) -> np.ndarray:
    eps = 1e-4 * (1 + np.linalg.norm(theta)) / (1 + np.linalg.norm(v))
    return (M.gradient(m, theta + eps * v, batch) - M.gradient(m, theta - eps * v, batch)) / (2 * eps)


def _random_case(m: M.ModelSpec, seed: int, b: int = 8):
    rng = RngStream(seed).child("verify", m.kind, m.activation, len(m.layer_sizes)).generator()
    theta = rng.standard_normal(m.d) * 0.5
    x = rng.standard_normal((b, m.n_in))
    if m.loss == "squared-error":
        y = rng.standard_normal(b)
    else:
        y = rng.integers(0, m.n_out, size=b).astype(np.float64)
    return theta, M.Batch(x, y), rng.standard_normal(m.d)


def _near_kink(m: M.ModelSpec, theta, batch, h) -> bool:
    if m.activation != "relu" or len(m.layer_sizes) < 3:
        return False
    layers = M.unpack(m, theta)
    zs, _ = M._forward(m, layers, batch.x)
    return any(np.min(np.abs(z)) < 1e3 * h for z in zs[:-1])


def verify_numerics(
    specs: Sequence[M.ModelSpec], seeds: Sequence[int], grad_tol: float = 1e-5, hvp_tol: float = 1e-4,
    sym_tol: float = 1e-8,
) -> list[CheckResult]:
    """Gradient, HVP and Hessian-symmetry checks against finite differences."""
    out = []
    for m in specs:
        name = f"{m.kind}/{m.activation}/{list(m.layer_sizes)}"
        for seed in seeds:
            theta, batch, v = _random_case(m, seed)
            kink = _near_kink(m, theta, batch, 1e-5)

            def status(err, tol):
                if kink:
                    return "excluded"
                return "pass" if err <= tol else "fail"

            note = "relu kink within finite-difference reach" if kink else ""
            err = gradient_rel_error(M.gradient(m, theta, batch), fd_gradient(m, theta, batch))
            out.append(CheckResult("gradient", name, seed, err, grad_tol, status(err, grad_tol), note))
            hv, fd = M.hvp(m, theta, batch, v), fd_hvp(m, theta, batch, v)
            err = float(np.linalg.norm(hv - fd) / max(np.linalg.norm(fd), 1e-12))
            out.append(CheckResult("hvp", name, seed, err, hvp_tol, status(err, hvp_tol), note))
            if m.d <= 256:
                h = M.dense_hessian(m, theta, batch)
                err = float(np.max(np.abs(h - h.T)))
                out.append(CheckResult("hessian-symmetry", name, seed, err, sym_tol,
                                       "pass" if err <= sym_tol else "fail"))
    return out


def taylor_gap(seed: int, eta: float, radius: int, t: int = 0, per_node: int = 16, dims: int = 4,
               batch_size: int = 4) -> float:
    """``|GT - estimate|`` for a 3-node ring of linear least-squares models."""
    shards, ev = synth_regression(3, per_node, dims, seed)
    topo = build_ring(3)
    m = M.ModelSpec("linear-regression", (dims, 1))
    cfg = TrainConfig(rounds=t + radius + 1, lr=eta, batch_size=batch_size, seed=seed)
    trace = run_training(cfg, topo, uniform_mixing(topo), shards, m)
    gt = dice_gt(trace, InfluenceQuery(0, t, radius, estimator="gt"), ev).total
    est = dice_e_r_hop(trace, InfluenceQuery(0, t, radius), ev).total
    return abs(gt - est)


def taylor_residual_study(seeds: Sequence[int], radius: int, etas=(0.1, 0.05)) -> tuple[float, list[float]]:
    """Median over seeds of ``gap(eta_0) / gap(eta_1)``; about 4 when the residual is second order."""
    ratios = [taylor_gap(s, etas[0], radius) / taylor_gap(s, etas[1], radius) for s in seeds]
    return float(np.median(ratios)), ratios
