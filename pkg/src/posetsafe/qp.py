"""Exact solver for tiny dense QPs ``min |u - u_ref|^2 s.t. A u >= c``.

Every subset of constraints is tried as an active set. Dimensions are capped
(3 controls, 8 constraints), so this is at most 256 small linear solves and
the answer is exact up to rounding. It serves as ground truth for the
closed-form projection, generates expert demonstrations, and plays the
simultaneous-enforcement baseline.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

MAX_CONTROLS = 3
MAX_CONSTRAINTS = 8
COND_LIMIT = 1e12
FEAS_TOL = 1e-9
MULT_TOL = 1e-10


class QpError(ValueError):
    pass


class Infeasible(QpError):
    pass


@dataclass
class QpProblem:
    u_ref: np.ndarray
    A: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    c: np.ndarray = field(default_factory=lambda: np.zeros(0))
    slack_weight: float = 0.0

    def __post_init__(self):
        self.u_ref = np.asarray(self.u_ref, dtype=float).reshape(-1)
        m = self.u_ref.shape[0]
        self.A = np.asarray(self.A, dtype=float).reshape(-1, m)
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        if not 1 <= m <= MAX_CONTROLS:
            raise QpError(f"control dimension {m} outside 1..{MAX_CONTROLS}")
        if self.A.shape[0] != self.c.shape[0]:
            raise QpError("A and c disagree on the constraint count")
        if self.A.shape[0] > MAX_CONSTRAINTS:
            raise QpError(f"at most {MAX_CONSTRAINTS} constraints")
        if self.slack_weight < 0:
            raise QpError("slack weight must be non-negative")


@dataclass
class QpSolution:
    u: np.ndarray
    active: tuple[int, ...]
    multipliers: np.ndarray
    slack: np.ndarray | None = None
    ill_conditioned: bool = False


@lru_cache(maxsize=None)
def _subsets(k: int, max_size: int) -> tuple[tuple[int, ...], ...]:
    out = []
    for r in range(min(k, max_size) + 1):
        out.extend(itertools.combinations(range(k), r))
    return tuple(out)


def _enumerate(y_ref, N, c, allow_pinv=True):
    """Batched enumeration in a metric where the objective is ``|y - y_ref|^2``.

    ``y_ref`` (B, d), ``N`` (B, K, d), ``c`` (B, K). Returns ``y`` (B, d),
    ``lam`` (B, K), ``found`` (B,), ``ill`` (B,) and the chosen subset index.
    """
    B, K, d = N.shape
    best_obj = np.full(B, np.inf)
    best_y = np.array(y_ref, copy=True)
    best_lam = np.zeros((B, K))
    best_ill = np.zeros(B, dtype=bool)
    best_subset = np.full(B, -1)
    subsets = _subsets(K, min(K, d))
    scale = 1.0 + np.abs(c).max(axis=1, initial=0.0)
    for s_idx, S in enumerate(subsets):
        S = list(S)
        ill = np.zeros(B, dtype=bool)
        if S:
            NS = N[:, S, :]
            gram = NS @ NS.transpose(0, 2, 1)
            rhs = c[:, S] - np.einsum("bsd,bd->bs", NS, y_ref)
            cond = np.linalg.cond(gram)
            ok = np.isfinite(cond) & (cond <= COND_LIMIT)
            lamS = np.zeros((B, len(S)))
            if ok.any():
                lamS[ok] = np.linalg.solve(gram[ok], rhs[ok][..., None])[..., 0]
            if allow_pinv and (~ok).any():
                bad = ~ok
                lamS[bad] = np.einsum("bij,bj->bi", np.linalg.pinv(gram[bad]), rhs[bad])
                ill = bad
            y = y_ref + np.einsum("bs,bsd->bd", lamS, NS)
            lam = np.zeros((B, K))
            lam[:, S] = lamS
            # pseudo-solves must still satisfy the active equalities
            eq_ok = np.all(np.abs(np.einsum("bsd,bd->bs", NS, y) - c[:, S]) <= FEAS_TOL * scale[:, None], axis=1)
        else:
            y = np.array(y_ref, copy=True)
            lam = np.zeros((B, K))
            eq_ok = np.ones(B, dtype=bool)
        primal = np.all(np.einsum("bkd,bd->bk", N, y) - c >= -FEAS_TOL * scale[:, None], axis=1)
        dual = np.all(lam >= -MULT_TOL * scale[:, None], axis=1)
        obj = np.sum((y - y_ref) ** 2, axis=1)
        improves = np.isinf(best_obj) | (obj < best_obj - 1e-15 * (1.0 + np.where(np.isinf(best_obj), 0.0, best_obj)))
        take = primal & dual & eq_ok & improves
        best_obj = np.where(take, obj, best_obj)
        best_y[take] = y[take]
        best_lam[take] = lam[take]
        best_ill[take] = ill[take]
        best_subset[take] = s_idx
    chosen = [subsets[i] if i >= 0 else () for i in best_subset]
    return best_y, best_lam, np.isfinite(best_obj), best_ill, chosen


def _lift(u_ref, A, c, w):
    """Slack problem as a projection in (u, sqrt(w) s) coordinates."""
    B, K, m = A.shape
    sw = np.sqrt(w)
    N = np.concatenate([A, np.broadcast_to(np.eye(K) / sw, (B, K, K))], axis=2)
    y_ref = np.concatenate([u_ref, np.zeros((B, K))], axis=1)
    return y_ref, N


def solve(problem: QpProblem) -> QpSolution:
    """Exact minimiser; raises :class:`Infeasible` in hard mode when no point satisfies every constraint."""
    u_ref = problem.u_ref[None]
    A, c = problem.A[None], problem.c[None]
    m = problem.u_ref.shape[0]
    K = problem.c.shape[0]
    if problem.slack_weight > 0 and K:
        y_ref, N = _lift(u_ref, A, c, problem.slack_weight)
        y, lam, found, ill, subset = _enumerate(y_ref, N, c)
        u = y[0, :m]
        slack = y[0, m:] / np.sqrt(problem.slack_weight)
    else:
        y, lam, found, ill, subset = _enumerate(u_ref, A, c)
        u, slack = y[0], None
    if not found[0]:
        raise Infeasible("no point satisfies all constraints")
    active = subset[0]
    return QpSolution(u, tuple(active), lam[0], slack, bool(ill[0]))


def solve_batch(u_ref, A, c, slack_weight: float = 0.0):
    """Vectorised :func:`solve`. Returns ``(u, feasible)``; infeasible rows keep ``u_ref``."""
    u_ref = np.atleast_2d(np.asarray(u_ref, dtype=float))
    A = np.asarray(A, dtype=float)
    c = np.asarray(c, dtype=float)
    m = u_ref.shape[1]
    if A.shape[1] == 0:
        return u_ref.copy(), np.ones(u_ref.shape[0], dtype=bool)
    if slack_weight > 0:
        y_ref, N = _lift(u_ref, A, c, slack_weight)
        y, _, found, _, _ = _enumerate(y_ref, N, c)
        return y[:, :m], found
    y, _, found, _, _ = _enumerate(u_ref, A, c)
    return y, found


def solve_projected_gradient(problem: QpProblem, iterations: int = 10_000) -> np.ndarray:
    """Independent oracle: accelerated projected gradient on the dual.

    The dual of the hard problem is ``max_{lam >= 0} -|A^T lam|^2 / 2 - lam.(A u_ref - c)``
    and the primal point is ``u_ref + A^T lam``. Step size is ``1/L`` with
    ``L = |A A^T|_2``.
    """
    A, c, u_ref = problem.A, problem.c, problem.u_ref
    if A.shape[0] == 0:
        return u_ref.copy()
    G = A @ A.T
    L = float(np.linalg.eigvalsh(G).max())
    lam = np.zeros(A.shape[0])
    z = lam.copy()
    t = 1.0
    r = c - A @ u_ref
    for _ in range(iterations):
        grad = r - G @ z
        lam_next = np.maximum(z + grad / L, 0.0)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = lam_next + ((t - 1.0) / t_next) * (lam_next - lam)
        lam, t = lam_next, t_next
    return u_ref + A.T @ lam


EXPERT_SLACK_WEIGHT = 1e3
EXPERT_OK, EXPERT_MAXIMAL, EXPERT_SLACK = 0, 1, 2


def expert_control_batch(scenario, x, u_ref=None, t: int = 0, ctx=None):
    """Expert controls for a batch of states.

    Hard QP over the scenario's expert constraints around the reference
    controller. Where that is infeasible, retry with only the poset-maximal
    expert constraints, then with the quadratic-slack relaxation. Returns
    ``(u, status)`` with status 0 (exact), 1 (maximal-only) or 2 (slack).
    """
    from .poset import maximal_elements

    x = np.atleast_2d(np.asarray(x, dtype=float))
    if u_ref is None:
        u_ref = scenario.reference(x, t, ctx)
    u_ref = np.atleast_2d(u_ref)
    ids = tuple(scenario.expert_ids)
    A, c, _ = scenario.compile(x, ids=ids)
    u, ok = solve_batch(u_ref, A, c)
    status = np.where(ok, EXPERT_OK, EXPERT_SLACK)
    if not ok.all():
        bad = ~ok
        top = [k for k, j in enumerate(ids) if j in set(maximal_elements(scenario.poset))]
        u_top, ok_top = solve_batch(u_ref[bad], A[bad][:, top], c[bad][:, top])
        u_slack, _ = solve_batch(u_ref[bad], A[bad], c[bad], EXPERT_SLACK_WEIGHT)
        u[bad] = np.where(ok_top[:, None], u_top, u_slack)
        status[bad] = np.where(ok_top, EXPERT_MAXIMAL, EXPERT_SLACK)
    return u, status


def expert_control(scenario, x, u_ref=None, t: int = 0, ctx=None) -> np.ndarray:
    """Single-state expert; raises :class:`Infeasible` when the hard QP has no solution."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if u_ref is None:
        u_ref = scenario.reference(x, t, None if ctx is None else np.atleast_2d(ctx))
    A, c, _ = scenario.compile(x, ids=tuple(scenario.expert_ids))
    sol = solve(QpProblem(np.ravel(u_ref), A[0], c[0]))
    return sol.u
