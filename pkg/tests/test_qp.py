import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posetsafe import qp
from posetsafe.geometry import Halfspace, project
from posetsafe.scenarios import make_scenario


def test_examples():
    sol = qp.solve(qp.QpProblem(np.array([0.0, 0.0]), [[1.0, 0.0]], [1.0]))
    np.testing.assert_allclose(sol.u, project(Halfspace([1, 0], 1), [0, 0]), atol=1e-12)
    assert sol.active == (0,)
    with pytest.raises(qp.Infeasible):
        qp.solve(qp.QpProblem(np.array([0.0]), [[1.0], [-1.0]], [1.0, 0.0]))
    sol = qp.solve(qp.QpProblem(np.array([0.4, -0.3])))
    np.testing.assert_array_equal(sol.u, [0.4, -0.3])


def test_problem_validation():
    with pytest.raises(qp.QpError):
        qp.QpProblem(np.zeros(2), np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(qp.QpError):
        qp.QpProblem(np.zeros(2), np.zeros((9, 2)), np.zeros(9))
    with pytest.raises(qp.QpError):
        qp.QpProblem(np.zeros(2), slack_weight=-1.0)


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.integers(1, 5), st.sampled_from([2, 3]))
def test_matches_dual_projected_gradient(seed, K, m):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(K, m))
    u0 = rng.normal(size=m)
    c = A @ u0 - np.abs(rng.normal(size=K))  # u0 is feasible
    prob = qp.QpProblem(rng.normal(size=m) * 3, A, c)
    sol = qp.solve(prob)
    assert np.all(A @ sol.u - c >= -1e-9)
    ref = qp.solve_projected_gradient(prob, iterations=20_000)
    obj = lambda u: np.sum((u - prob.u_ref) ** 2)
    assert obj(sol.u) <= obj(ref) + 1e-6
    np.testing.assert_allclose(sol.u, ref, atol=1e-4)
    # KKT: stationarity with non-negative multipliers on the active set
    assert np.all(sol.multipliers >= -1e-9)


@given(st.integers(0, 10_000))
def test_slack_mode_always_feasible_and_relaxes(seed):
    rng = np.random.default_rng(seed)
    A = np.array([[1.0, 0.0], [-1.0, 0.0]])
    c = np.array([1.0, 0.0]) + np.abs(rng.normal(size=2))
    u_ref = rng.normal(size=2)
    with pytest.raises(qp.Infeasible):
        qp.solve(qp.QpProblem(u_ref, A, c))
    sol = qp.solve(qp.QpProblem(u_ref, A, c, slack_weight=1e3))
    assert np.all(A @ sol.u - c >= -sol.slack - 1e-9)
    assert np.all(sol.slack >= -1e-12)


def test_batch_agrees_with_single(rng):
    B, K = 50, 3
    A = rng.normal(size=(B, K, 2))
    c = rng.normal(size=(B, K))
    U = rng.normal(size=(B, 2))
    u, ok = qp.solve_batch(U, A, c)
    for b in range(B):
        try:
            sol = qp.solve(qp.QpProblem(U[b], A[b], c[b]))
        except qp.Infeasible:
            assert not ok[b]
            continue
        assert ok[b]
        np.testing.assert_allclose(u[b], sol.u, atol=1e-10)


def test_expert_far_from_hazards_returns_reference():
    sc = make_scenario("navigation")
    x = np.array([[-8.0, -8.0, np.pi / 4, 0.0]])
    goal = np.array([sc.params["goal"]])
    u_ref = sc.reference(x, 0, goal)
    np.testing.assert_allclose(qp.expert_control(sc, x[0], u_ref), u_ref[0])


def test_expert_single_active_obstacle_is_projection():
    sc = make_scenario("navigation")
    ox, oy, r = sc.params["obstacles"][0]
    x = np.array([ox - 1.6, oy, 0.0, 1.5])  # heading straight at obstacle 0
    A, c, _ = sc.compile(x[None])
    u_ref = np.array([0.0, 1.0])
    margins = A[0] @ u_ref - c[0]
    assert margins[0] < 0 and np.all(margins[1:] > 0)
    expected = project(Halfspace(A[0, 0], c[0, 0]), u_ref)
    np.testing.assert_allclose(qp.expert_control(sc, x, u_ref), expected, atol=1e-10)


def test_expert_rollouts_satisfy_compiled_constraints():
    from posetsafe.sim import run_expert

    sc = make_scenario("navigation", {"horizon": 80})
    eps = sc.sample_episodes(np.random.default_rng(0), 100)
    run = run_expert(sc, eps)
    assert np.all(run.status == qp.EXPERT_OK)
    E, T, _ = run.controls.shape
    X = run.states[:, :-1].reshape(E * T, -1)
    U = run.controls.reshape(E * T, -1)
    A, c, _ = sc.compile(X, ids=sc.expert_ids)
    assert np.all(np.einsum("bkm,bm->bk", A, U) - c >= -1e-7 * (1 + np.abs(c)))
