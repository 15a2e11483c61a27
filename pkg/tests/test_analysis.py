import numpy as np
import pytest

from dice import model as M
from dice.analysis import (
    AlignmentResult,
    HarnessError,
    StatisticsError,
    alignment_schedule,
    cascade_map,
    detect_anomaly,
    fd_gradient,
    fd_hvp,
    gradient_rel_error,
    hop_profile,
    pearson,
    run_alignment,
    spearman,
    verify_numerics,
)
from dice.data import flip_labels, synth_classification, synth_regression
from dice.engine import TrainConfig, run_training
from dice.influence import InfluenceQuery, dice_e_one_hop
from dice.topology import build_exponential, build_ring, uniform_mixing


def test_textbook_correlations():
    x, y = [1, 2, 3, 4, 5], [2, 4, 5, 4, 5]
    assert pearson(x, y) == pytest.approx(6 / np.sqrt(60), rel=1e-12)
    assert spearman(x, y) == pytest.approx(7 / np.sqrt(90), rel=1e-12)
    assert pearson(x, x) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(StatisticsError):
        pearson([1, 1, 1], [1, 2, 3])


def test_alignment_invariant_to_uniform_rescaling():
    rng = np.random.default_rng(0)
    gt = rng.standard_normal(30)
    pairs = list(zip(gt, gt + 0.1 * rng.standard_normal(30)))
    a = AlignmentResult(pairs)
    b = AlignmentResult([(3.0 * g, 3.0 * e) for g, e in pairs])
    assert a.pearson == pytest.approx(b.pearson, rel=1e-12)
    assert a.spearman == b.spearman
    assert AlignmentResult([(g, g) for g in gt]).pearson == pytest.approx(1.0, abs=1e-15)


def test_alignment_schedule_is_stratified_and_deterministic(small_mlp_trace):
    trace, _ = small_mlp_trace
    sched = alignment_schedule(trace, 5, seed=1)
    assert sched == alignment_schedule(trace, 5, seed=1)
    assert len(sched) == 5
    assert all(0 <= t < trace.T and 0 <= j < trace.n for j, t in sched)
    with pytest.raises(HarnessError):
        alignment_schedule(trace, 1, seed=0)


def test_alignment_small_step_linear_model():
    shards, ev = synth_regression(6, 32, 4, seed=0)
    topo = build_ring(6)
    m = M.ModelSpec("linear-regression", (4, 1))
    trace = run_training(TrainConfig(rounds=30, lr=0.01, batch_size=8), topo, uniform_mixing(topo), shards, m)
    res = run_alignment(trace, ev, trials=30, seed=0)
    assert len(res.pairs) == 30
    assert res.pearson >= 0.99


def test_anomaly_flagged_on_small_exponential_graph():
    shards, ev = synth_classification(8, 128, 8, 4, seed=1, n_eval=128)
    topo = build_exponential(8)
    senders = topo.in_neighbors(0, include_self=False)
    bad = senders[1]
    shards[bad] = flip_labels(shards[bad], 1.0, seed=1, classes=4)
    m = M.ModelSpec("mlp", (8, 8, 4))
    trace = run_training(TrainConfig(rounds=10, lr=0.1, batch_size=64), topo, uniform_mixing(topo), shards, m)
    ranking = detect_anomaly(trace, 0, ev, range(9))
    assert ranking[0][0] == bad
    assert [s for _, s in ranking] == sorted((s for _, s in ranking), reverse=True)


def test_cascade_identity_mixing_stays_at_stem():
    shards, ev = synth_classification(4, 32, 3, 3, seed=0, n_eval=20)
    m = M.ModelSpec("logistic-regression", (3, 3))
    trace = run_training(TrainConfig(rounds=3, lr=0.1, batch_size=8), build_ring(4), np.eye(4), shards, m)
    cm = cascade_map(trace, 2, 1, ev)
    assert set(cm.scores) == {2}
    assert cm.out_influence == 0.0


def test_cascade_totals_match_one_hop_estimate(small_mlp_trace):
    trace, ev = small_mlp_trace
    cm = cascade_map(trace, 1, 3, ev)
    rep = dice_e_one_hop(trace, InfluenceQuery(1, 3, 1), ev)
    assert cm.total == pytest.approx(rep.total, rel=1e-12)
    assert cm.hop_rings == {1: 0, 0: 1, 2: 1}


def test_cascade_uniform_ring_is_roughly_symmetric():
    shards, ev = synth_classification(8, 64, 4, 3, seed=5, n_eval=128)
    topo = build_ring(8)
    m = M.ModelSpec("logistic-regression", (4, 3))
    trace = run_training(TrainConfig(rounds=4, lr=0.05, batch_size=16), topo, uniform_mixing(topo), shards, m)
    cm = cascade_map(trace, 3, 2, ev)
    left, right = cm.scores[2], cm.scores[4]
    assert abs(left - right) <= 0.1 * max(abs(left), abs(right))


def test_hop_profile_shape(small_mlp_trace):
    trace, ev = small_mlp_trace
    prof = hop_profile(trace, [(0, 1), (2, 3)], ev, radius=2)
    assert prof.shape == (3,) and np.all(prof >= 0)


def test_verify_numerics_quadratic_and_mlp():
    lin = M.ModelSpec("linear-regression", (4, 1))
    assert all(r.status == "pass" for r in verify_numerics([lin], range(3)))
    # central differences carry no truncation error on a quadratic, so a wide step isolates rounding
    rng = np.random.default_rng(0)
    for _ in range(5):
        theta, v = rng.standard_normal((2, lin.d))
        batch = M.Batch(rng.standard_normal((8, 4)), rng.standard_normal(8))
        assert gradient_rel_error(M.gradient(lin, theta, batch), fd_gradient(lin, theta, batch, h=1e-2)) <= 1e-10
        hv, fd = M.hvp(lin, theta, batch, v), fd_hvp(lin, theta, batch, v)
        assert np.linalg.norm(hv - fd) <= 1e-10 * np.linalg.norm(fd)
    mlp = M.ModelSpec("mlp", (5, 6, 2), activation="tanh")
    assert mlp.d == 50
    res = verify_numerics([mlp], range(3))
    assert all(r.status == "pass" for r in res if r.check == "gradient")


def test_verify_numerics_flags_relu_kinks():
    relu = M.ModelSpec("mlp", (5, 6, 6, 3), activation="relu")
    res = verify_numerics([relu], range(30))
    assert all(r.status in ("pass", "excluded") for r in res)
    assert any(r.status == "excluded" for r in res)
