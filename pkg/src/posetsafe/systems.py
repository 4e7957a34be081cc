"""Control-affine benchmark systems and barrier functions.

All evaluators are batched: states have shape ``(B, n)`` (a single state of
shape ``(n,)`` is promoted). Derivatives are coded by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_FRAME = 1e-6


class FrameSingularity(ValueError):
    pass


def wrap_angle(a):
    """Map angles to ``[-pi, pi)``."""
    return np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi


def _batch(x):
    x = np.asarray(x, dtype=float)
    return x[None] if x.ndim == 1 else x


class ControlAffineSystem:
    """``xdot = f(x) + g(x) u`` with a constant input map."""

    state_dim: int
    control_dim: int
    config_indices: tuple[int, ...] = ()
    input_map: np.ndarray

    def f(self, x):
        raise NotImplementedError

    def jac_f(self, x):
        raise NotImplementedError

    def g(self, x):
        x = _batch(x)
        return np.broadcast_to(self.input_map, (x.shape[0],) + self.input_map.shape)

    def xdot(self, x, u):
        x = _batch(x)
        u = np.atleast_2d(np.asarray(u, dtype=float))
        return self.f(x) + np.einsum("bij,bj->bi", self.g(x), u)

    def step(self, x, u, dt):
        return _batch(x) + dt * self.xdot(x, u)


class SingleIntegrator(ControlAffineSystem):
    def __init__(self, dim: int = 2):
        self.state_dim = self.control_dim = dim
        self.config_indices = tuple(range(dim))
        self.input_map = np.eye(dim)

    def f(self, x):
        return np.zeros_like(_batch(x))

    def jac_f(self, x):
        x = _batch(x)
        return np.zeros((x.shape[0], self.state_dim, self.state_dim))


class Unicycle(ControlAffineSystem):
    """State ``(x, y, theta, v)``; controls (yaw rate, acceleration)."""

    state_dim = 4
    control_dim = 2
    config_indices = (0, 1)
    input_map = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

    def f(self, x):
        x = _batch(x)
        th, v = x[:, 2], x[:, 3]
        out = np.zeros_like(x)
        out[:, 0] = v * np.cos(th)
        out[:, 1] = v * np.sin(th)
        return out

    def jac_f(self, x):
        x = _batch(x)
        th, v = x[:, 2], x[:, 3]
        J = np.zeros((x.shape[0], 4, 4))
        J[:, 0, 2] = -v * np.sin(th)
        J[:, 0, 3] = np.cos(th)
        J[:, 1, 2] = v * np.cos(th)
        J[:, 1, 3] = np.sin(th)
        return J


class Manipulator(ControlAffineSystem):
    """Two-link arm as a double integrator: state ``(th1, w1, th2, w2)``, joint accelerations in."""

    state_dim = 4
    control_dim = 2
    config_indices = (0, 2)
    input_map = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])

    def __init__(self, l1: float = 1.0, l2: float = 1.0):
        if l1 <= 0 or l2 <= 0:
            raise ValueError("link lengths must be positive")
        self.l1, self.l2 = float(l1), float(l2)

    def f(self, x):
        x = _batch(x)
        out = np.zeros_like(x)
        out[:, 0] = x[:, 1]
        out[:, 2] = x[:, 3]
        return out

    def jac_f(self, x):
        x = _batch(x)
        J = np.zeros((x.shape[0], 4, 4))
        J[:, 0, 1] = 1.0
        J[:, 2, 3] = 1.0
        return J

    def tip(self, x):
        """End-effector position; both angles are absolute."""
        x = _batch(x)
        t1, t2 = x[:, 0], x[:, 2]
        return np.stack([self.l1 * np.cos(t1) + self.l2 * np.cos(t2),
                         self.l1 * np.sin(t1) + self.l2 * np.sin(t2)], axis=1)

    def inverse_kinematics(self, p, elbow: float = 1.0):
        """Absolute joint angles reaching ``p``; ``elbow`` picks the sign of ``th2 - th1``."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        l1, l2 = self.l1, self.l2
        r2 = np.sum(p * p, axis=1)
        cphi = np.clip((r2 - l1 * l1 - l2 * l2) / (2 * l1 * l2), -1.0, 1.0)
        phi = np.sign(elbow) * np.arccos(cphi)
        th1 = np.arctan2(p[:, 1], p[:, 0]) - np.arctan2(l2 * np.sin(phi), l1 + l2 * np.cos(phi))
        return th1, th1 + phi


@dataclass
class Track:
    """Piecewise-constant curvature: ``curvatures[k]`` applies from ``breaks[k]`` on."""

    breaks: tuple[float, ...] = (0.0,)
    curvatures: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if len(self.breaks) != len(self.curvatures):
            raise ValueError("one curvature per segment start")

    def curvature(self, s):
        s = np.asarray(s, dtype=float)
        idx = np.clip(np.searchsorted(np.asarray(self.breaks), s, side="right") - 1, 0, None)
        return np.asarray(self.curvatures)[idx]


class CurvilinearBicycle(ControlAffineSystem):
    """Kinematic bicycle in a path frame: state ``(s, d, mu, v, delta)``.

    Controls are (steering rate, longitudinal acceleration). The slip angle is
    ``atan(lr / (lf + lr) * tan(delta))``.
    """

    state_dim = 5
    control_dim = 2
    config_indices = (0, 1)
    input_map = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 1.0], [1.0, 0.0]])

    def __init__(self, lr: float = 1.5, lf: float = 1.5, track: Track | None = None):
        self.lr, self.lf = float(lr), float(lf)
        self.track = track or Track()

    def slip(self, delta):
        k = self.lr / (self.lf + self.lr)
        beta = np.arctan(k * np.tan(delta))
        dbeta = k / np.cos(delta) ** 2 / (1.0 + (k * np.tan(delta)) ** 2)
        return beta, dbeta

    def _frame(self, x):
        kap = self.track.curvature(x[:, 0])
        D = 1.0 - x[:, 1] * kap
        if np.any(D <= EPS_FRAME):
            raise FrameSingularity("1 - d * kappa(s) vanished; path frame is singular")
        return kap, D

    def f(self, x):
        x = _batch(x)
        kap, D = self._frame(x)
        mu, v, delta = x[:, 2], x[:, 3], x[:, 4]
        beta, _ = self.slip(delta)
        psi = mu + beta
        out = np.zeros_like(x)
        out[:, 0] = v * np.cos(psi) / D
        out[:, 1] = v * np.sin(psi)
        out[:, 2] = v / self.lr * np.sin(beta) - kap * v * np.cos(psi) / D
        return out

    def jac_f(self, x):
        x = _batch(x)
        kap, D = self._frame(x)
        mu, v, delta = x[:, 2], x[:, 3], x[:, 4]
        beta, db = self.slip(delta)
        psi = mu + beta
        cp, sp = np.cos(psi), np.sin(psi)
        J = np.zeros((x.shape[0], x.shape[1], x.shape[1]))
        # s-rate; curvature is piecewise constant so d/ds vanishes
        J[:, 0, 1] = v * cp * kap / D**2
        J[:, 0, 2] = -v * sp / D
        J[:, 0, 3] = cp / D
        J[:, 0, 4] = -v * sp * db / D
        J[:, 1, 2] = v * cp
        J[:, 1, 3] = sp
        J[:, 1, 4] = v * cp * db
        J[:, 2, 1] = -kap**2 * v * cp / D**2
        J[:, 2, 2] = kap * v * sp / D
        J[:, 2, 3] = np.sin(beta) / self.lr - kap * cp / D
        J[:, 2, 4] = v / self.lr * np.cos(beta) * db + kap * v * sp * db / D
        return J


class WithStaticContext(ControlAffineSystem):
    """Append constant per-episode parameters (e.g. obstacle positions) to the state.

    Barriers can then read episode parameters from the state while Lie
    derivatives stay exact, since the appended entries never move.
    """

    def __init__(self, base: ControlAffineSystem, n_context: int):
        self.base = base
        self.n_context = int(n_context)
        self.state_dim = base.state_dim + self.n_context
        self.control_dim = base.control_dim
        self.config_indices = base.config_indices
        self.input_map = np.vstack([base.input_map, np.zeros((self.n_context, base.control_dim))])

    def __getattr__(self, name):
        return getattr(self.__dict__["base"], name)

    def f(self, x):
        x = _batch(x)
        n = self.base.state_dim
        out = np.zeros_like(x)
        out[:, :n] = self.base.f(x[:, :n])
        return out

    def jac_f(self, x):
        x = _batch(x)
        n = self.base.state_dim
        J = np.zeros((x.shape[0], x.shape[1], x.shape[1]))
        J[:, :n, :n] = self.base.jac_f(x[:, :n])
        return J


# ---------------------------------------------------------------- barriers


@dataclass
class CircleBarrier:
    """``(x_i - cx)^2 + (x_j - cy)^2 - R^2`` with a fixed center."""

    coords: tuple[int, int]
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def value(self, x):
        x = _batch(x)
        i, j = self.coords
        return (x[:, i] - self.center[0]) ** 2 + (x[:, j] - self.center[1]) ** 2 - self.radius**2

    def grad(self, x):
        x = _batch(x)
        i, j = self.coords
        G = np.zeros_like(x)
        G[:, i] = 2 * (x[:, i] - self.center[0])
        G[:, j] = 2 * (x[:, j] - self.center[1])
        return G

    def hess(self, x):
        x = _batch(x)
        i, j = self.coords
        H = np.zeros((x.shape[0], x.shape[1], x.shape[1]))
        H[:, i, i] = H[:, j, j] = 2.0
        return H


@dataclass
class NearestCircleBarrier:
    """Circle barrier against whichever of several state-carried centers is closest.

    ``centers`` lists index pairs into the state where each center lives.
    The value is the minimum over centers; derivatives follow the minimiser.
    """

    coords: tuple[int, int]
    centers: tuple[tuple[int, int], ...]
    radius: float

    def _all(self, x):
        i, j = self.coords
        return np.stack([(x[:, i] - x[:, a]) ** 2 + (x[:, j] - x[:, b]) ** 2 for a, b in self.centers], axis=1)

    def value(self, x):
        x = _batch(x)
        return self._all(x).min(axis=1) - self.radius**2

    def grad(self, x):
        x = _batch(x)
        i, j = self.coords
        k = self._all(x).argmin(axis=1)
        G = np.zeros_like(x)
        rows = np.arange(x.shape[0])
        ci = np.array([self.centers[q][0] for q in k])
        cj = np.array([self.centers[q][1] for q in k])
        di = x[rows, i] - x[rows, ci]
        dj = x[rows, j] - x[rows, cj]
        G[rows, i] = 2 * di
        G[rows, j] = 2 * dj
        G[rows, ci] = -2 * di
        G[rows, cj] = -2 * dj
        return G

    def hess(self, x):
        x = _batch(x)
        i, j = self.coords
        k = self._all(x).argmin(axis=1)
        H = np.zeros((x.shape[0], x.shape[1], x.shape[1]))
        rows = np.arange(x.shape[0])
        ci = np.array([self.centers[q][0] for q in k])
        cj = np.array([self.centers[q][1] for q in k])
        for p, q in ((i, ci), (j, cj)):
            H[rows, p, p] = 2.0
            H[rows, q, q] = 2.0
            H[rows, p, q] = -2.0
            H[rows, q, p] = -2.0
        return H


@dataclass
class AffineBarrier:
    """``weights . x + offset``."""

    weights: dict[int, float]
    offset: float

    def value(self, x):
        x = _batch(x)
        out = np.full(x.shape[0], float(self.offset))
        for i, w in self.weights.items():
            out = out + w * x[:, i]
        return out

    def grad(self, x):
        x = _batch(x)
        G = np.zeros_like(x)
        for i, w in self.weights.items():
            G[:, i] = w
        return G

    def hess(self, x):
        x = _batch(x)
        return np.zeros((x.shape[0], x.shape[1], x.shape[1]))


@dataclass
class RelativeAngleBarrier:
    """``sign * (wrap(x_j - x_i) - limit)``: joint-limit barrier on a wrapped angle difference.

    ``sign=+1`` with the lower limit gives ``phi - phi_min``; ``sign=-1`` with
    the upper limit gives ``phi_max - phi``.
    """

    i: int
    j: int
    limit: float
    sign: float

    def phi(self, x):
        x = _batch(x)
        return wrap_angle(x[:, self.j] - x[:, self.i])

    def value(self, x):
        return self.sign * (self.phi(x) - self.limit)

    def grad(self, x):
        x = _batch(x)
        G = np.zeros_like(x)
        G[:, self.i] = -self.sign
        G[:, self.j] = self.sign
        return G

    def hess(self, x):
        x = _batch(x)
        return np.zeros((x.shape[0], x.shape[1], x.shape[1]))


@dataclass
class TipBarrier:
    """Squared tip-to-obstacle distance minus ``R^2`` for the two-link arm."""

    l1: float
    l2: float
    center: tuple[float, float]
    radius: float
    i1: int = 0
    i2: int = 2

    def _parts(self, x):
        t1, t2 = x[:, self.i1], x[:, self.i2]
        ex = self.l1 * np.cos(t1) + self.l2 * np.cos(t2) - self.center[0]
        ey = self.l1 * np.sin(t1) + self.l2 * np.sin(t2) - self.center[1]
        return t1, t2, ex, ey

    def value(self, x):
        x = _batch(x)
        _, _, ex, ey = self._parts(x)
        return ex**2 + ey**2 - self.radius**2

    def grad(self, x):
        x = _batch(x)
        t1, t2, ex, ey = self._parts(x)
        G = np.zeros_like(x)
        G[:, self.i1] = 2 * self.l1 * (-ex * np.sin(t1) + ey * np.cos(t1))
        G[:, self.i2] = 2 * self.l2 * (-ex * np.sin(t2) + ey * np.cos(t2))
        return G

    def hess(self, x):
        x = _batch(x)
        t1, t2, ex, ey = self._parts(x)
        l1, l2 = self.l1, self.l2
        H = np.zeros((x.shape[0], x.shape[1], x.shape[1]))
        s1, c1, s2, c2 = np.sin(t1), np.cos(t1), np.sin(t2), np.cos(t2)
        H[:, self.i1, self.i1] = 2 * l1 * l1 - 2 * l1 * (ex * c1 + ey * s1)
        H[:, self.i2, self.i2] = 2 * l2 * l2 - 2 * l2 * (ex * c2 + ey * s2)
        cross = 2 * l1 * l2 * (s1 * s2 + c1 * c2)
        H[:, self.i1, self.i2] = H[:, self.i2, self.i1] = cross
        return H


# ------------------------------------------------- named evaluator helpers


_UNICYCLE = Unicycle()


def unicycle_dynamics(x, u):
    return _UNICYCLE.xdot(x, u)[0] if np.ndim(x) == 1 else _UNICYCLE.xdot(x, u)


def unicycle_obstacle_barrier(x, obstacle):
    x0, y0, R = obstacle
    out = CircleBarrier((0, 1), (x0, y0), R).value(x)
    return float(out[0]) if np.ndim(x) == 1 else out


def manipulator_dynamics(x, u):
    arm = Manipulator()
    return arm.xdot(x, u)[0] if np.ndim(x) == 1 else arm.xdot(x, u)


def manipulator_tip_barrier(x, obstacle, l1=1.0, l2=1.0):
    x0, y0, R = obstacle
    out = TipBarrier(l1, l2, (x0, y0), R).value(x)
    return float(out[0]) if np.ndim(x) == 1 else out


def joint_limit_barriers(x, phi_min, phi_max):
    if not phi_min < phi_max:
        raise ValueError("phi_min must be below phi_max")
    lo = RelativeAngleBarrier(0, 2, phi_min, +1.0).value(x)
    hi = RelativeAngleBarrier(0, 2, phi_max, -1.0).value(x)
    if np.ndim(x) == 1:
        return float(lo[0]), float(hi[0])
    return lo, hi


def bicycle_dynamics(x, u, track: Track | None = None, lr: float = 1.5, lf: float = 1.5):
    car = CurvilinearBicycle(lr, lf, track)
    out = car.xdot(x, u)
    return out[0] if np.ndim(x) == 1 else out
