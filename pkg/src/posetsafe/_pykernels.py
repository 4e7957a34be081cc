"""Pure numpy implementation of the batched projection kernels.

Shapes: ``A`` (B, N, m), ``c`` (B, N), ``orders`` (H, N) int, ``U`` (B, H, m).
Vectorised over batch and heads; the loop runs over projection steps.
"""

import numpy as np

_EPS_NORM2 = 1e-18
_ROUNDING_SLACK = 64 * np.finfo(float).eps


def _gather(A, c, orders, k):
    j = orders[:, k]  # (H,)
    return A[:, j, :], c[:, j]  # (B, H, m), (B, H)


def project_heads(A, c, orders, U, record=False):
    """Sequentially project each head's control along its order.

    Returns ``(out, active, infeasible, steps)``; ``steps`` holds every
    intermediate control (B, H, N + 1, m) when ``record`` is set, else None.
    """
    A = np.ascontiguousarray(A, dtype=np.float64)
    c = np.ascontiguousarray(c, dtype=np.float64)
    orders = np.ascontiguousarray(orders, dtype=np.int64)
    u = np.array(U, dtype=np.float64, copy=True)
    B, H, m = u.shape
    N = orders.shape[1]
    active = np.zeros((B, H, N), dtype=np.uint8)
    infeasible = np.zeros((B, H), dtype=np.uint8)
    steps = np.empty((B, H, N + 1, m)) if record else None
    if record:
        steps[:, :, 0] = u
    for k in range(N):
        a, ck = _gather(A, c, orders, k)
        au = a * u
        r = ck - au.sum(axis=-1)
        tol = _ROUNDING_SLACK * (np.abs(ck) + np.abs(au).sum(axis=-1))
        nrm2 = (a * a).sum(axis=-1)
        degenerate = nrm2 < _EPS_NORM2
        hit = (r > tol) & ~degenerate
        infeasible |= ((r > tol) & degenerate).astype(np.uint8)
        scale = np.where(hit, r / np.where(degenerate, 1.0, nrm2), 0.0)
        u = np.where(hit[..., None], u + scale[..., None] * a, u)
        active[:, :, k] = hit
        if record:
            steps[:, :, k + 1] = u
    return u, active, infeasible, steps


def project_heads_backward(A, c, orders, active, G):
    """Reverse pass: gradients w.r.t. the nominal controls and the thresholds.

    ``G`` (B, H, m) is the upstream gradient of the outputs. Returns
    ``(G_U, G_c)`` with ``G_c`` (B, N) summed over heads.
    """
    A = np.ascontiguousarray(A, dtype=np.float64)
    orders = np.ascontiguousarray(orders, dtype=np.int64)
    g = np.array(G, dtype=np.float64, copy=True)
    B, H, m = g.shape
    N = orders.shape[1]
    gc = np.zeros((B, N))
    rows = np.arange(B)[:, None]
    for k in range(N - 1, -1, -1):
        a, _ = _gather(A, c, orders, k)
        on = active[:, :, k].astype(bool)
        nrm2 = np.where(on, (a * a).sum(axis=-1), 1.0)
        s = np.where(on, (a * g).sum(axis=-1) / nrm2, 0.0)  # (B, H)
        g = g - s[..., None] * a
        np.add.at(gc, (rows, orders[None, :, k]), s)
    return g, gc
