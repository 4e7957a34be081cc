"""Barrier conditions compiled to control-space halfspaces, and their projections.

A halfspace is ``{u : a @ u >= c}``. For a first-order barrier ``b`` on
``xdot = f(x) + g(x) u`` the normal is ``L_g b`` and the threshold is
``-L_f b - k * b``. Relative-degree-two barriers use the nested form
``psi1 = L_f b + k1 * b``, ``psi1dot + k2 * psi1 >= 0``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

EPS_NORM = 1e-9
EPS_FEAS = 1e-9
EPS_DOT = 1e-12
DELTA_BOUNDARY = 1e-8

# multiples of machine epsilon treated as floating-point noise in the residual
_ROUNDING_SLACK = 64 * np.finfo(float).eps


class GeometryError(ValueError):
    pass


class DegenerateNormal(GeometryError):
    pass


class RelativeDegreeMismatch(GeometryError):
    pass


def softplus(raw):
    return np.logaddexp(0.0, raw)


def softplus_inverse(value):
    value = np.asarray(value, dtype=float)
    if np.any(value <= 0):
        raise ValueError("softplus image is strictly positive")
    return value + np.log(-np.expm1(-value))


def sigmoid(raw):
    raw = np.asarray(raw, dtype=float)
    return np.exp(-np.logaddexp(0.0, -raw))


class Barrier(Protocol):
    """Scalar barrier with analytic derivatives, batched over leading axes."""

    def value(self, x: np.ndarray) -> np.ndarray: ...

    def grad(self, x: np.ndarray) -> np.ndarray: ...

    def hess(self, x: np.ndarray) -> np.ndarray: ...


class ControlAffine(Protocol):
    state_dim: int
    control_dim: int

    def f(self, x: np.ndarray) -> np.ndarray: ...

    def jac_f(self, x: np.ndarray) -> np.ndarray: ...

    def g(self, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class Halfspace:
    a: np.ndarray
    c: float
    constraint_id: int = 0

    def __post_init__(self):
        a = np.array(self.a, dtype=float).reshape(-1)
        a.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "c", float(self.c))

    @property
    def degenerate(self) -> bool:
        return float(np.linalg.norm(self.a)) < EPS_NORM

    def margin(self, u) -> float:
        return float(self.a @ np.asarray(u, dtype=float) - self.c)

    def contains(self, u, tol: float = EPS_FEAS) -> bool:
        return self.margin(u) >= -tol


@dataclass(frozen=True)
class BarrierSpec:
    """A barrier plus its class-K gains, stored as softplus pre-images.

    ``order`` is 1 for an ordinary CBF and 2 for the relative-degree-two
    construction. ``raw_gains`` has one entry per order.
    """

    name: str
    barrier: Barrier
    order: int = 1
    raw_gains: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        raw = tuple(float(r) for r in self.raw_gains) or (0.5,) * self.order
        if len(raw) != self.order:
            raise ValueError(f"{self.name}: expected {self.order} gains, got {len(raw)}")
        object.__setattr__(self, "raw_gains", raw)

    @property
    def gains(self) -> np.ndarray:
        return softplus(np.array(self.raw_gains))

    def with_raw_gains(self, raw) -> "BarrierSpec":
        return BarrierSpec(self.name, self.barrier, self.order, tuple(np.ravel(raw)))

    @classmethod
    def with_gains(cls, name: str, barrier: Barrier, order: int, gains) -> "BarrierSpec":
        return cls(name, barrier, order, tuple(softplus_inverse(np.ravel(gains))))


@dataclass
class CompiledBarrier:
    """Gain-independent Lie-derivative terms of one barrier over a batch of states.

    ``lf2b`` is ``None`` for first-order barriers.
    """

    order: int
    a: np.ndarray  # (B, m)
    b: np.ndarray  # (B,)
    lfb: np.ndarray  # (B,)
    lf2b: np.ndarray | None = None

    def threshold(self, gains) -> np.ndarray:
        gains = np.asarray(gains, dtype=float)
        if self.order == 1:
            return -self.lfb - gains[0] * self.b
        k1, k2 = gains
        return -self.lf2b - (k1 + k2) * self.lfb - k1 * k2 * self.b

    def threshold_grad(self, gains) -> np.ndarray:
        """d threshold / d gains, shape (B, order)."""
        gains = np.asarray(gains, dtype=float)
        if self.order == 1:
            return (-self.b)[:, None]
        k1, k2 = gains
        return np.stack([-self.lfb - k2 * self.b, -self.lfb - k1 * self.b], axis=-1)


def lie_terms(barrier: Barrier, system: ControlAffine, x: np.ndarray):
    """Return ``b, grad b, L_f b, L_g b`` and, via the Hessian, ``L_f^2 b, L_g L_f b``.

    ``g`` is treated as state independent when differentiating ``L_f b``;
    every system shipped here has a constant input map.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    b = barrier.value(x)
    db = barrier.grad(x)
    fx = system.f(x)
    gx = system.g(x)
    lfb = np.einsum("bi,bi->b", db, fx)
    lgb = np.einsum("bi,bij->bj", db, gx)
    # grad(L_f b) = H_b f + J_f^T grad b
    dlfb = np.einsum("bij,bj->bi", barrier.hess(x), fx) + np.einsum("bji,bj->bi", system.jac_f(x), db)
    lf2b = np.einsum("bi,bi->b", dlfb, fx)
    lglfb = np.einsum("bi,bij->bj", dlfb, gx)
    return b, lfb, lgb, lf2b, lglfb


def compile_barrier(spec: BarrierSpec, system: ControlAffine, x: np.ndarray, *, strict: bool = True) -> CompiledBarrier:
    """Batched compile. With ``strict`` a relative-degree mismatch raises."""
    b, lfb, lgb, lf2b, lglfb = lie_terms(spec.barrier, system, x)
    lgb_norm = np.linalg.norm(lgb, axis=-1)
    if spec.order == 1:
        if strict and np.all(lgb_norm < EPS_NORM):
            raise RelativeDegreeMismatch(f"{spec.name}: L_g b vanishes; barrier has relative degree > 1")
        return CompiledBarrier(1, lgb, b, lfb)
    if strict and np.any(lgb_norm >= EPS_NORM):
        raise RelativeDegreeMismatch(f"{spec.name}: L_g b is nonzero; barrier has relative degree 1")
    return CompiledBarrier(2, lglfb, b, lfb, lf2b)


def compile_halfspace(spec: BarrierSpec, system: ControlAffine, x, constraint_id: int = 0) -> Halfspace:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("compile_halfspace takes a single state; use compile_barrier for batches")
    comp = compile_barrier(spec, system, x[None])
    a = comp.a[0]
    if np.linalg.norm(a) < EPS_NORM:
        raise DegenerateNormal(f"{spec.name}: control-space normal vanishes at this state")
    return Halfspace(a, float(comp.threshold(spec.gains)[0]), constraint_id)


def residual_tolerance(a: np.ndarray, c, u: np.ndarray):
    """Floating-point noise floor for ``c - a @ u``; residuals below it count as satisfied."""
    return _ROUNDING_SLACK * (np.abs(c) + np.sum(np.abs(a * u), axis=-1))


def _require_normal(h: Halfspace) -> float:
    nrm2 = float(h.a @ h.a)
    if nrm2 < EPS_NORM**2:
        raise DegenerateNormal(f"constraint {h.constraint_id}: zero normal")
    return nrm2


def project(h: Halfspace, u) -> np.ndarray:
    """Euclidean projection of ``u`` onto ``h`` in closed form."""
    u = np.asarray(u, dtype=float)
    nrm2 = _require_normal(h)
    r = h.c - h.a @ u
    if r <= residual_tolerance(h.a, h.c, u):
        return u.copy()
    return u + (r / nrm2) * h.a


@dataclass(frozen=True)
class ProjectionJacobian:
    d_out_d_u: np.ndarray
    d_out_d_c: np.ndarray
    active: bool


def project_jacobian(h: Halfspace, u) -> ProjectionJacobian:
    u = np.asarray(u, dtype=float)
    nrm2 = _require_normal(h)
    m = u.shape[0]
    r = h.c - h.a @ u
    if r <= residual_tolerance(h.a, h.c, u):
        return ProjectionJacobian(np.eye(m), np.zeros(m), False)
    return ProjectionJacobian(np.eye(m) - np.outer(h.a, h.a) / nrm2, h.a / nrm2, True)


class Compatibility(enum.Enum):
    COMPATIBLE = "compatible"
    CONFLICTING = "conflicting"
    DEGENERATE = "degenerate"


def intersection_nonempty(hi: Halfspace, hj: Halfspace) -> bool:
    ni, nj = np.linalg.norm(hi.a), np.linalg.norm(hj.a)
    cos = float(hi.a @ hj.a) / (ni * nj)
    if cos > -1.0 + 1e-12:
        return True
    # anti-parallel: a_i.u >= c_i and -a_i.u >= c_j * |a_i| / |a_j|
    return hi.c + hj.c * ni / nj <= EPS_FEAS * max(1.0, abs(hi.c), abs(hj.c))


def check_compatibility(hi: Halfspace, hj: Halfspace) -> Compatibility:
    """Sufficient test for non-interference between two halfspaces.

    Non-opposing normals plus a nonempty intersection guarantee that
    projecting onto either halfspace keeps points of the other inside it.
    """
    if hi.degenerate or hj.degenerate:
        return Compatibility.DEGENERATE
    if float(hi.a @ hj.a) >= -EPS_DOT and intersection_nonempty(hi, hj):
        return Compatibility.COMPATIBLE
    return Compatibility.CONFLICTING


def config_input_map(system, x) -> np.ndarray:
    """Map from control to the lowest configuration derivative it reaches.

    Uses ``g_q`` if the configuration block is directly actuated, otherwise
    ``(d f_q / d x) g`` (relative degree two).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    idx = list(system.config_indices)
    g = system.g(x)[0]
    gq = g[idx]
    if np.linalg.norm(gq) > EPS_NORM:
        return gq
    return system.jac_f(x)[0][idx] @ g


def isotropy_check(system, x) -> float:
    """Relative Frobenius deviation of ``G G^T`` from a multiple of the identity."""
    gq = config_input_map(system, x)
    gram = gq @ gq.T
    gamma = np.trace(gram) / gram.shape[0]
    if gamma <= 0:
        return float("inf")
    return float(np.linalg.norm(gram - gamma * np.eye(gram.shape[0])) / gamma)
