import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from posetsafe import kernels
from posetsafe.composition import sequential_project
from posetsafe.geometry import Halfspace


def instance(seed, B=7, N=3, m=2, H=4):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(B, N, m))
    c = rng.normal(size=(B, N))
    U = rng.normal(size=(B, H, m)) * 2
    orders = np.stack([rng.permutation(N) for _ in range(H)]).astype(np.int64)
    return A, c, orders, U


@given(st.integers(0, 10_000))
def test_kernel_matches_scalar_reference(seed):
    A, c, orders, U = instance(seed)
    out, active, infeasible, steps = kernels.project_heads(A, c, orders, U, True)
    for b in range(A.shape[0]):
        hs = [Halfspace(A[b, i], c[b, i], i) for i in range(A.shape[1])]
        for h in range(orders.shape[0]):
            ref, _ = sequential_project(hs, orders[h], U[b, h])
            np.testing.assert_allclose(out[b, h], ref, atol=1e-12)
            np.testing.assert_allclose(steps[b, h, -1], ref, atol=1e-12)
            np.testing.assert_allclose(steps[b, h, 0], U[b, h])
            # the last constraint of the order always holds afterwards
            last = orders[h, -1]
            assert A[b, last] @ out[b, h] - c[b, last] >= -1e-9


@pytest.mark.skipif(len(kernels.available_backends()) < 2, reason="compiled extension not built")
@given(st.integers(0, 10_000))
def test_backends_agree(seed):
    A, c, orders, U = instance(seed, B=16, N=4, H=3)
    py, cy = kernels.get_backend("python"), kernels.get_backend("cython")
    r_py = py.project_heads(A, c, orders, U, True)
    r_cy = cy.project_heads(A, c, orders, U, True)
    for a, b in zip(r_py, r_cy):
        np.testing.assert_allclose(a, b, atol=1e-13)
    G = np.random.default_rng(seed + 1).normal(size=U.shape)
    for a, b in zip(py.project_heads_backward(A, c, orders, r_py[1], G),
                    cy.project_heads_backward(A, c, orders, r_cy[1], G)):
        np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("backend", sorted(kernels.available_backends()))
def test_backward_finite_differences(backend):
    impl = kernels.get_backend(backend)
    checked = 0
    for seed in range(40):
        A, c, orders, U = instance(seed, B=3, N=3, H=2)
        out, active, _, steps = impl.project_heads(A, c, orders, U, True)
        # skip instances where some step's residual sits near the activation kink
        margins = np.einsum("bim,bhkm->bhki", A, steps) - c[:, None, None, :]
        k = np.arange(orders.shape[1])
        pre = np.stack([margins[:, h, k, orders[h]] for h in range(orders.shape[0])], axis=1)
        if np.min(np.abs(pre)) < 1e-4:
            continue
        G = np.random.default_rng(seed).normal(size=U.shape)
        G_U, G_c = impl.project_heads_backward(A, c, orders, active, G)
        f = lambda U_, c_: np.sum(G * impl.project_heads(A, c_, orders, U_, False)[0])
        h = 1e-6
        num_U = np.zeros_like(U)
        for idx in np.ndindex(U.shape):
            e = np.zeros_like(U)
            e[idx] = h
            num_U[idx] = (f(U + e, c) - f(U - e, c)) / (2 * h)
        num_c = np.zeros_like(c)
        for idx in np.ndindex(c.shape):
            e = np.zeros_like(c)
            e[idx] = h
            num_c[idx] = (f(U, c + e) - f(U, c - e)) / (2 * h)
        np.testing.assert_allclose(G_U, num_U, rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(G_c, num_c, rtol=1e-5, atol=1e-7)
        checked += 1
    assert checked >= 10


def test_degenerate_normal_is_skipped_and_flagged():
    A = np.array([[[0.0, 0.0], [1.0, 0.0]]])
    c = np.array([[1.0, 1.0]])
    U = np.zeros((1, 1, 2))
    out, active, infeasible, _ = kernels.project_heads(A, c, np.array([[0, 1]]), U)
    np.testing.assert_allclose(out[0, 0], [1.0, 0.0])
    assert infeasible[0, 0]


def test_pure_python_env_switch():
    import subprocess
    import sys

    code = "from posetsafe import kernels; print(kernels.BACKEND)"
    env = {"POSETSAFE_PURE_PYTHON": "1", "PATH": ""}
    res = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env)
    assert res.stdout.strip() == "python"
