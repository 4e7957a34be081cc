import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from posetsafe import qp
from posetsafe.geometry import (BarrierSpec, Compatibility, DegenerateNormal, Halfspace, RelativeDegreeMismatch,
                                check_compatibility, compile_barrier, compile_halfspace, isotropy_check, project,
                                project_jacobian, softplus, softplus_inverse)
from posetsafe.systems import (AffineBarrier, CircleBarrier, CurvilinearBicycle, Manipulator,
                               RelativeAngleBarrier, SingleIntegrator, Unicycle)

finite = st.floats(-10, 10, allow_nan=False)


def test_projection_examples():
    np.testing.assert_array_equal(project(Halfspace([1, 0], -1), [0, 0]), [0, 0])
    np.testing.assert_allclose(project(Halfspace([1, 0], 1), [0, 0]), [1, 0])
    np.testing.assert_allclose(project(Halfspace([1, 1], 2), [0, 0]), [1, 1])
    with pytest.raises(DegenerateNormal):
        project(Halfspace([0, 0], 1), [0, 0])


@given(st.lists(finite, min_size=2, max_size=2), finite, st.lists(finite, min_size=2, max_size=2))
def test_projection_properties(a, c, u):
    a = np.array(a)
    if np.linalg.norm(a) < 1e-3:
        a = a + np.array([1.0, 0.0])
    h = Halfspace(a, c)
    p = project(h, u)
    assert h.margin(p) >= -1e-9 * max(1.0, abs(c), np.abs(a).sum() * np.abs(u).max())
    # idempotent and the identity on feasible points
    np.testing.assert_allclose(project(h, p), p, atol=1e-9)
    if h.margin(u) >= 0:
        np.testing.assert_array_equal(p, u)
    # closest feasible point: matches the QP oracle
    sol = qp.solve(qp.QpProblem(np.array(u), a[None], np.array([c])))
    np.testing.assert_allclose(p, sol.u, atol=1e-9)


def test_jacobian_examples():
    J = project_jacobian(Halfspace([1, 0], -1), [0, 0])
    np.testing.assert_array_equal(J.d_out_d_u, np.eye(2))
    np.testing.assert_array_equal(J.d_out_d_c, [0, 0])
    J = project_jacobian(Halfspace([1, 0], 1), [0, 0])
    np.testing.assert_allclose(J.d_out_d_u, [[0, 0], [0, 1]])
    assert J.active


def test_jacobian_finite_differences(rng):
    for _ in range(50):
        a = rng.normal(size=2)
        u = rng.normal(size=2)
        c = a @ u + abs(rng.normal()) + 0.1  # active
        J = project_jacobian(Halfspace(a, c), u)
        h = 1e-6
        num = np.column_stack([(project(Halfspace(a, c), u + h * e) - project(Halfspace(a, c), u - h * e)) / (2 * h)
                               for e in np.eye(2)])
        np.testing.assert_allclose(J.d_out_d_u, num, rtol=1e-5, atol=1e-8)
        num_c = (project(Halfspace(a, c + h), u) - project(Halfspace(a, c - h), u)) / (2 * h)
        np.testing.assert_allclose(J.d_out_d_c, num_c, rtol=1e-5, atol=1e-8)


def test_compatibility_examples(rng):
    assert check_compatibility(Halfspace([1, 0], 0), Halfspace([0, 1], 0)) is Compatibility.COMPATIBLE
    assert check_compatibility(Halfspace([1, 0], 1), Halfspace([-1, 0], 0)) is Compatibility.CONFLICTING
    assert check_compatibility(Halfspace([0, 0], 1), Halfspace([1, 0], 0)) is Compatibility.DEGENERATE
    # non-interference on random compatible pairs
    checked = 0
    while checked < 1000:
        ai, aj = rng.normal(size=2), rng.normal(size=2)
        hi, hj = Halfspace(ai, rng.normal()), Halfspace(aj, rng.normal())
        if check_compatibility(hi, hj) is not Compatibility.COMPATIBLE:
            continue
        checked += 1
        for u in rng.normal(size=(100, 2)) * 3:
            if hj.contains(u):
                assert hj.contains(project(hi, u), tol=1e-9)


def test_softplus_roundtrip():
    x = np.linspace(0.01, 20, 50)
    np.testing.assert_allclose(softplus(softplus_inverse(x)), x, rtol=1e-12)
    assert np.all(softplus(np.linspace(-50, 50, 101)) >= 0)


def test_unicycle_barrier_relative_degree():
    spec = BarrierSpec("obs", CircleBarrier((0, 1), (3.0, 0.0), 1.0), order=1)
    with pytest.raises(RelativeDegreeMismatch):
        compile_barrier(spec, Unicycle(), np.array([[0.0, 0.0, 0.0, 1.0]]))
    spec2 = BarrierSpec("obs", CircleBarrier((0, 1), (3.0, 0.0), 1.0), order=2)
    comp = compile_barrier(spec2, Unicycle(), np.array([[0.0, 0.0, 0.0, 1.0]]))
    assert comp.order == 2


def test_phi_max_normal():
    spec = BarrierSpec("jmax", RelativeAngleBarrier(0, 2, 2.5, -1.0), order=2)
    x = np.array([0.3, 0.1, 1.2, -0.4])
    h = compile_halfspace(spec, Manipulator(), x)
    np.testing.assert_allclose(h.a, [1.0, -1.0])


def test_phi_max_threshold_against_trajectory_differences():
    # psi1 = bdot + k1 b must satisfy psi1dot + k2 psi1 = a.u - c along the dynamics
    sys_ = Manipulator()
    k1, k2 = 1.3, 0.7
    spec = BarrierSpec.with_gains("jmax", RelativeAngleBarrier(0, 2, 2.5, -1.0), 2, [k1, k2])
    x = np.array([0.3, 0.1, 1.2, -0.4])
    u = np.array([0.5, -0.2])
    h = compile_halfspace(spec, sys_, x)
    bar = spec.barrier

    def psi1(z):
        b = bar.value(z[None])[0]
        bdot = bar.grad(z[None])[0] @ sys_.xdot(z[None], u[None])[0]
        return bdot + k1 * b

    dt = 1e-6
    xp = x + dt * sys_.xdot(x[None], u[None])[0]
    xm = x - dt * sys_.xdot(x[None], u[None])[0]
    psi1dot = (psi1(xp) - psi1(xm)) / (2 * dt)
    assert abs(psi1dot + k2 * psi1(x) - (h.a @ u - h.c)) < 1e-6


def test_speed_barrier_matches_oracle(rng):
    car = CurvilinearBicycle()
    k = 0.8
    spec = BarrierSpec.with_gains("vmax", AffineBarrier({3: -1.0}, 12.0), 1, [k])
    for _ in range(20):
        x = np.array([rng.uniform(0, 50), rng.uniform(-1, 1), rng.uniform(-0.2, 0.2), rng.uniform(2, 12),
                      rng.uniform(-0.3, 0.3)])
        h = compile_halfspace(spec, car, x)
        np.testing.assert_allclose(h.a, [0.0, -1.0])
        assert h.c == pytest.approx(-k * (12.0 - x[3]))
        u = rng.normal(size=2) * 3
        sol = qp.solve(qp.QpProblem(u, h.a[None], np.array([h.c])))
        np.testing.assert_allclose(project(h, u), sol.u, atol=1e-9)


def test_isotropy():
    assert isotropy_check(SingleIntegrator(2), np.zeros(2)) == 0.0
    assert isotropy_check(Manipulator(), np.array([0.1, 0.0, 0.4, 0.0])) == pytest.approx(0.0, abs=1e-12)
    assert isotropy_check(Unicycle(), np.array([0.0, 0.0, 0.3, 2.0])) > 0.1
