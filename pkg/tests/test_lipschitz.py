import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipens import nn
from lipens.ensemble import BaggedEnsemble
from lipens.lipschitz import (
    AscentConfig,
    analytic_bound,
    empirical_llc,
    norm_ceiling,
    pair_ratios,
    spectral_norm,
    write_reports_jsonl,
)
from lipens.nn import DenseLayer, Network

from oracles import jacobi_singular_values, max_corner_l1


def linear_net(w):
    w = np.asarray(w, dtype=float)
    return Network([DenseLayer(w, np.zeros(w.shape[0]), nn.IDENTITY)])


def test_spectral_norm_small_cases():
    assert spectral_norm(np.diag([3.0, 4.0])) == pytest.approx(4.0, rel=1e-12)
    for n in (1, 2, 7):
        assert spectral_norm(np.eye(n)) == pytest.approx(1.0, rel=1e-12)
    assert spectral_norm(np.zeros((3, 2))) == 0.0
    with pytest.raises(ValueError):
        spectral_norm(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        spectral_norm(np.array([[np.inf]]))


def test_spectral_norm_matches_jacobi_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        m, n = rng.integers(1, 11, size=2)
        w = rng.normal(size=(m, n))
        worst = max(worst, abs(spectral_norm(w) - jacobi_singular_values(w)[0]))
    assert worst <= 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50).filter(lambda c: abs(c) > 1e-3))
def test_spectral_norm_is_absolutely_homogeneous(seed, c):
    w = np.random.default_rng(seed).normal(size=(5, 4))
    assert spectral_norm(c * w) == pytest.approx(abs(c) * spectral_norm(w), rel=1e-9)


def test_analytic_bound_examples():
    assert analytic_bound(linear_net(np.diag([3.0, 4.0]))).value == pytest.approx(4.0)
    net = Network(
        [DenseLayer(np.diag([2.0, 1.0]), np.ones(2), nn.RELU), DenseLayer(np.array([[5.0, 0.0]]), [7.0], nn.IDENTITY)]
    )
    rep = analytic_bound(net)
    assert rep.value == pytest.approx(10.0)
    assert rep.kind == "analytic_upper"
    assert rep.config["layer_norms"] == pytest.approx([2.0, 5.0])


def test_analytic_bound_dominates_random_pairs():
    rng = np.random.default_rng(5)
    net = nn.init_network([6, 12, 9, 3], rng)
    bound = analytic_bound(net).value
    x1 = rng.normal(size=(10_000, 6))
    x2 = x1 + rng.normal(scale=rng.choice([1e-3, 1e-1, 1.0], size=(10_000, 1)), size=(10_000, 6))
    assert pair_ratios(net, x1, x2, "l2-l2").max() <= bound


def test_identity_map_gives_input_dimension():
    for d in (1, 3, 10):
        rep = empirical_llc(linear_net(np.eye(d)), np.random.default_rng(d).random((5, d)), 0.1)
        assert rep.value == pytest.approx(d, rel=1e-12)


def test_constant_map_gives_zero():
    net = Network([DenseLayer(np.zeros((3, 4)), [1.0, -2.0, 0.5], nn.IDENTITY)])
    rep = empirical_llc(net, np.random.default_rng(0).random((4, 4)), 0.1)
    assert rep.value == 0.0


def test_linear_map_matches_corner_enumeration():
    # corner maximum is the exact answer for a linear map; the ascent is
    # multimodal on the hypercube surface, so a generous restart count is used
    rng = np.random.default_rng(11)
    cfg = AscentConfig(restarts=64, seed=3)
    for _ in range(20):
        d = int(rng.integers(1, 11))
        k = int(rng.integers(1, 6))
        w = rng.normal(size=(k, d))
        oracle = max_corner_l1(w, 0.1)
        rep = empirical_llc(linear_net(w), rng.random((3, d)), 0.1, cfg)
        assert rep.per_anchor.max() <= oracle * (1 + 1e-9)
        assert rep.per_anchor.min() >= 0.98 * oracle


def test_errors():
    net = linear_net(np.eye(2))
    with pytest.raises(ValueError):
        empirical_llc(net, np.zeros((2, 2)), 0.0)
    with pytest.raises(ValueError):
        empirical_llc(net, np.zeros((0, 2)), 0.1)
    with pytest.raises(ValueError):
        AscentConfig(restarts=0)
    with pytest.raises(ValueError):
        AscentConfig(norm="l3")


@pytest.fixture(scope="module")
def relu_net():
    return nn.init_network([5, 16, 16, 3], np.random.default_rng(2))


@pytest.mark.parametrize("norm", ["l1-linf", "l2-l2"])
def test_witnesses_reproduce_ratios(relu_net, norm):
    anchors = np.random.default_rng(4).random((12, 5))
    rep = empirical_llc(relu_net, anchors, 0.1, AscentConfig(restarts=3, norm=norm))
    again = pair_ratios(relu_net, anchors, rep.witnesses, norm)
    np.testing.assert_allclose(again, rep.per_anchor, rtol=1e-9, atol=0)
    dist = np.abs(rep.witnesses - anchors).max(axis=1) if norm == "l1-linf" else np.linalg.norm(rep.witnesses - anchors, axis=1)
    assert np.all(dist <= 0.1 * (1 + 1e-12))


def test_estimate_below_norm_ceiling(relu_net):
    anchors = np.random.default_rng(6).random((20, 5))
    rep = empirical_llc(relu_net, anchors, 0.2)
    assert rep.per_anchor.max() <= norm_ceiling(analytic_bound(relu_net).value, 5, 3)


@pytest.mark.parametrize("seed", range(20))
def test_larger_ball_does_not_lower_estimate(seed):
    net = nn.init_network([5, 16, 16, 3], np.random.default_rng(seed))
    anchors = np.random.default_rng(100 + seed).random((10, 5))
    small = empirical_llc(net, anchors, 0.05, AscentConfig(restarts=5, seed=1))
    big = empirical_llc(net, anchors, 0.1, AscentConfig(restarts=10, seed=1))
    assert big.value >= 0.99 * small.value


def test_estimate_is_deterministic(relu_net):
    anchors = np.random.default_rng(9).random((7, 5))
    a = empirical_llc(relu_net, anchors, 0.1)
    b = empirical_llc(relu_net, anchors, 0.1)
    assert a.value == b.value
    assert a.witnesses.tobytes() == b.witnesses.tobytes()


def test_chunking_does_not_change_result(relu_net):
    anchors = np.random.default_rng(10).random((9, 5))
    a = empirical_llc(relu_net, anchors, 0.1, AscentConfig(restarts=4))
    b = empirical_llc(relu_net, anchors, 0.1, AscentConfig(restarts=4, chunk_rows=5))
    np.testing.assert_allclose(a.per_anchor, b.per_anchor, rtol=1e-12)


def test_extra_witnesses_outside_ball_are_ignored(relu_net):
    anchors = np.random.default_rng(12).random((4, 5))
    base = empirical_llc(relu_net, anchors, 0.1, AscentConfig(restarts=2))
    far = anchors + 5.0
    with_far = empirical_llc(relu_net, anchors, 0.1, AscentConfig(restarts=2), extra_witnesses=[far])
    assert with_far.value == base.value


def test_bag_of_identical_members(relu_net):
    anchors = np.random.default_rng(13).random((10, 5))
    single = empirical_llc(relu_net, anchors, 0.1).value
    twin = relu_net.copy()
    mixed = BaggedEnsemble([relu_net, twin], [0.3, 0.7], [1.0, 1.0])
    assert empirical_llc(mixed, anchors, 0.1).value == pytest.approx(single, rel=0.01)
    first_only = BaggedEnsemble([relu_net, nn.init_network([5, 4, 3], np.random.default_rng(1))], [1.0, 0.0], [1.0, 1.0])
    assert empirical_llc(first_only, anchors, 0.1).value == single


def test_report_serialisation(tmp_path, relu_net):
    rep = empirical_llc(relu_net, np.random.default_rng(0).random((3, 5)), 0.1, AscentConfig(restarts=2))
    doc = json.loads(rep.to_json())
    assert doc["kind"] == "empirical_local"
    assert doc["radius"] == 0.1 and doc["n_samples"] == 3
    assert doc["config"]["steps"] == 50 and doc["config"]["step_size"] == pytest.approx(0.01)
    assert "witnesses" not in doc
    write_reports_jsonl([rep, analytic_bound(relu_net)], tmp_path / "r.jsonl", include_witnesses=True)
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert len(json.loads(lines[0])["witnesses"]) == 3
    assert math.isclose(json.loads(lines[1])["value"], analytic_bound(relu_net).value)
