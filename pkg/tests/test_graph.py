import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pushsum_gne.graph import (
    COLUMN_TOL,
    GraphSchedule,
    InvalidGraphError,
    MixConstants,
    build_weights,
    builtin_schedule,
    complete_graph,
    estimate_theta,
    load_schedule,
    mix,
    paper_fig1,
    schedule_from_mapping,
    theta_ceiling,
    update_mix_constants,
    validate_schedule,
)


# -- build_weights ------------------------------------------------------------


def test_single_node_weight_is_one():
    assert np.array_equal(build_weights([[True]]), [[1.0]])


def test_complete_pair_is_uniform_half():
    W = build_weights(np.ones((2, 2), dtype=bool))
    assert np.array_equal(W, np.full((2, 2), 0.5))
    assert np.allclose(W.sum(axis=0), 1.0)


def test_directed_three_cycle_out_degree_rule():
    A = np.eye(3, dtype=bool)
    for j in range(3):
        A[(j + 1) % 3, j] = True  # edge j -> j+1
    W = build_weights(A)
    expected = np.zeros((3, 3))
    for j in range(3):
        expected[j, j] = 0.5
        expected[(j + 1) % 3, j] = 0.5
    assert np.array_equal(W, expected)


def test_missing_self_loop_raises():
    A = np.ones((3, 3), dtype=bool)
    A[1, 1] = False
    with pytest.raises(InvalidGraphError, match="node 1"):
        build_weights(A)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8).flatmap(lambda n: st.lists(st.booleans(), min_size=n * n, max_size=n * n).map(lambda b: (n, b))))
def test_random_adjacency_gives_column_stochastic(nb):
    n, bits = nb
    A = np.array(bits, dtype=bool).reshape(n, n) | np.eye(n, dtype=bool)
    W = build_weights(A)
    assert np.max(np.abs(W.sum(axis=0) - 1.0)) <= COLUMN_TOL
    assert np.all(np.diag(W) > 0)
    assert np.all((W > 0) == A)


# -- validate_schedule ----------------------------------------------------------


def test_complete_graph_passes():
    rep = validate_schedule(complete_graph(4))
    assert rep.ok
    assert [c.name for c in rep.checks][0].startswith("positive weights")


def _one_way(i, j, n=2):
    A = np.eye(n, dtype=bool)
    A[j, i] = True
    return build_weights(A)


def test_union_connectivity_depends_on_window():
    mats = [_one_way(0, 1), _one_way(1, 0)]
    assert validate_schedule(GraphSchedule(mats, window=2)).ok
    rep = validate_schedule(GraphSchedule(mats, window=1))
    assert not rep.ok
    (fail,) = rep.failures()
    assert "strongly connected" in fail.name and fail.first_offending_index == 0


def test_zero_column_fails_column_stochasticity():
    W = np.eye(3)
    W[:, 2] = 0.0
    W[2, 2] = 1e-3  # keep self-loop positive, column sum wrong
    rep = validate_schedule(GraphSchedule([np.eye(3), W], window=2))
    names = [c.name for c in rep.failures()]
    assert "column-stochastic" in names
    fail = [c for c in rep.failures() if c.name == "column-stochastic"][0]
    assert fail.first_offending_index == 1


def test_paper_fig1_needs_full_window():
    sched = paper_fig1(5)
    assert validate_schedule(sched).ok
    assert sched.window == 4 and sched.period == 4
    for W in sched.stack:
        sub = GraphSchedule([W], window=1)
        assert not validate_schedule(sub).ok


def test_generator_schedule_reports_sampled():
    mats = [_one_way(0, 1), _one_way(1, 0)]
    sched = GraphSchedule(generator=lambda t: mats[t % 2], window=2, horizon=20)
    rep = validate_schedule(sched)
    assert rep.ok and rep.sampled
    assert "sampled" in rep.format()


# -- mix ---------------------------------------------------------------------


def test_mix_identity():
    V = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(mix(V, np.eye(3)), V)


def test_mix_hand_example():
    W = np.array([[1.0, 0.5], [0.0, 0.5]])
    assert np.array_equal(mix(np.ones(2), W), [1.5, 0.5])


def test_mix_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        mix(np.ones(3), np.eye(2))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 7), st.integers(1, 3))
def test_mix_preserves_column_mass(seed, n, k):
    rng = np.random.default_rng(seed)
    A = (rng.random((n, n)) < 0.4) | np.eye(n, dtype=bool)
    W = build_weights(A)
    V = rng.normal(size=(n, k)) * 10
    out = mix(V, W)
    assert np.allclose(out.sum(axis=0), V.sum(axis=0), rtol=1e-10, atol=1e-10)


# -- push-sum constants -------------------------------------------------------


def test_doubly_stochastic_keeps_r_one():
    W = np.full((3, 3), 1 / 3)
    st_ = MixConstants.start(3)
    for _ in range(10):
        st_ = update_mix_constants(st_, W)
    assert st_.r_estimate == 1.0


def test_r_hand_product():
    W = np.array([[1.0, 0.5], [0.0, 0.5]])
    st_ = update_mix_constants(MixConstants.start(2), W)
    assert st_.r_estimate == 0.5


def test_r_nonincreasing_and_z_within_bounds():
    sched = paper_fig1(5)
    st_ = MixConstants.start(5)
    prev = 1.0
    for t in range(400):
        st_ = update_mix_constants(st_, sched[t])
        assert 0 < st_.r_estimate <= prev <= 1.0
        prev = st_.r_estimate
        assert abs(st_.product.sum() - 5) <= 1e-9 * 5
        assert np.all(st_.product >= st_.r_estimate) and np.all(st_.product <= 5)


def test_theta_fit_below_analytic_ceiling():
    sched = paper_fig1(5)
    theta = estimate_theta(sched, steps=300)
    assert 0 < theta < 1
    assert theta <= theta_ceiling(5, 4)


def test_theta_ceiling_formula():
    assert theta_ceiling(2, 1) == pytest.approx((1 - 2.0**-2) ** 0.5, rel=1e-14)


def test_complete_graph_reaches_consensus_immediately():
    assert estimate_theta(complete_graph(4)) == 0.0


# -- schedule files --------------------------------------------------------------


def test_schedule_file_round_trip(tmp_path):
    spec = {"n": 2, "window": 2, "slots": [{"edges": [[1, 0]]}, {"matrix": [[0.5, 0.0], [0.5, 1.0]]}]}
    p = tmp_path / "g.json"
    p.write_text(json.dumps(spec))
    sched = load_schedule(p)
    assert sched.N == 2 and sched.period == 2
    assert np.array_equal(sched[0], [[1.0, 0.5], [0.0, 0.5]])
    assert np.array_equal(sched[1], [[0.5, 0.0], [0.5, 1.0]])
    assert validate_schedule(sched).ok


def test_schedule_file_parse_error_has_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"n": 2,\n "slots": [}')
    with pytest.raises(ValueError, match=r"bad.json:2:"):
        load_schedule(p)


def test_schedule_mapping_edge_out_of_range():
    with pytest.raises(ValueError, match=r"slots\[0\].edges\[0\]"):
        schedule_from_mapping({"n": 2, "slots": [{"edges": [[0, 5]]}]})


def test_unknown_builtin():
    with pytest.raises(KeyError, match="paper-fig1"):
        builtin_schedule("nope", 3)
