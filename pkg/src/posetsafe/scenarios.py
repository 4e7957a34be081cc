"""Benchmark scenarios: navigation, manipulation and curvilinear driving.

A scenario bundles a control-affine system, its barriers with constraint ids,
the safety poset, a state-feedback reference controller, an episode sampler
and the feature map fed to the nominal policies. Per-episode parameters that
barriers need (driving obstacles) ride along in the state as static entries.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BarrierSpec, compile_barrier, softplus_inverse
from .poset import SafetyPoset
from .systems import (
    AffineBarrier,
    CircleBarrier,
    CurvilinearBicycle,
    Manipulator,
    NearestCircleBarrier,
    RelativeAngleBarrier,
    TipBarrier,
    Track,
    Unicycle,
    WithStaticContext,
    wrap_angle,
)

SCENARIOS = ("navigation", "manipulation", "driving", "driving4")

# Constants the source material leaves open are ours; every one is overridable.
DEFAULTS: dict[str, dict] = {
    "navigation": {
        "dt": 0.05,
        "horizon": 360,
        "noise_frac": 0.1,
        "data_noise_frac": 0.3,
        "heads": 6,
        "layers": [5, 128, 32, 32, 2],
        "goal": [8.0, 8.0],
        "obstacles": [[-4.5, -3.5, 1.0], [1.0, -0.2, 1.0], [4.5, 5.2, 1.0]],
        "start_center": [-8.0, -8.0],
        "start_spread": 1.5,
        "v_cruise": 1.5,
        "detour_range": 2.0,
        "gains": {"obstacle": [2.0, 2.0]},
        "u_clip": [2.0, 2.0],
    },
    "manipulation": {
        "dt": 0.05,
        "horizon": 370,
        "noise_frac": 0.1,
        "data_noise_frac": 0.3,
        "heads": 2,
        "layers": [6, 128, 256, 128, 32, 32, 2],
        "links": [1.0, 1.0],
        "obstacle": [0.2, 1.45, 0.3],
        "phi_limits": [-2.5, 2.5],
        "gains": {"obstacle": [1.0, 1.0], "joint": [1.0, 1.0]},
        "kp": 16.0,
        "kd": 8.0,
        "u_clip": [8.0, 8.0],
    },
    "driving": {
        "dt": 0.05,
        "horizon": 400,
        "noise_frac": 0.1,
        "data_noise_frac": 0.3,
        "heads": 2,
        "layers": [8, 128, 32, 32, 2],
        "lr": 1.5,
        "lf": 1.5,
        "lane_half_width": 2.0,
        "centerline_tol": 0.5,
        "speed_limits": [2.0, 12.0],
        "radius": 2.5,
        "v_cruise": 8.0,
        "track": {"breaks": [0.0], "curvatures": [0.0]},
        "gains": {"lane": [1.0, 1.0], "obstacle": [6.0, 6.0], "centerline": [1.0, 1.0], "speed": [1.0]},
        "pass_margin": 0.4,
        "u_clip": [1.0, 4.0],
        "levels": 2,
    },
}
DEFAULTS["driving4"] = dict(DEFAULTS["driving"], levels=4)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _spec(name, barrier, order, gains):
    return BarrierSpec(name, barrier, order, tuple(softplus_inverse(np.asarray(gains, dtype=float))))


def scenario_posets() -> dict[str, SafetyPoset]:
    """Safety posets of the four benchmark configurations (relation ``i < j``: j dominates)."""
    nav = SafetyPoset.antichain(3, names=("obs0", "obs1", "obs2"))
    manip = SafetyPoset.from_names(("obstacle", "joint_min", "joint_max"),
                                   [("obstacle", "joint_min"), ("obstacle", "joint_max")])
    drive2 = SafetyPoset.from_names(("lane_left", "lane_right", "obstacle"),
                                    [("lane_left", "obstacle"), ("lane_right", "obstacle")])
    tiers = [("cl_left", "cl_right"), ("v_min", "v_max"), ("lane_left", "lane_right"), ("obstacle",)]
    names = tuple(n for tier in tiers for n in tier)
    rel = [(lo, hi) for k in range(len(tiers) - 1) for lo in tiers[k] for hi in tiers[k + 1]]
    drive4 = SafetyPoset.from_names(names, rel)
    return {"navigation": nav, "manipulation": manip, "driving2": drive2, "driving4": drive4}


@dataclass
class Episodes:
    """Initial states (with static context appended) and per-episode reference data."""

    x0: np.ndarray
    ctx: np.ndarray

    def __len__(self):
        return self.x0.shape[0]

    def take(self, idx) -> "Episodes":
        return Episodes(self.x0[idx], self.ctx[idx])


@dataclass
class Scenario:
    name: str
    system: object
    specs: list[BarrierSpec]
    poset: SafetyPoset
    params: dict
    safety_ids: tuple[int, ...]
    expert_ids: tuple[int, ...]
    feature_dim: int
    phys_dim: int = field(default=0)

    def __post_init__(self):
        if len(self.specs) != self.poset.n:
            raise ValueError("every barrier needs exactly one poset index")
        if not self.phys_dim:
            self.phys_dim = self.system.state_dim

    # configuration ------------------------------------------------------
    @property
    def dt(self) -> float:
        return float(self.params["dt"])

    @property
    def horizon(self) -> int:
        return int(self.params["horizon"])

    @property
    def n_constraints(self) -> int:
        return len(self.specs)

    @property
    def control_dim(self) -> int:
        return self.system.control_dim

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.specs)

    def config_hash(self) -> str:
        blob = json.dumps({"name": self.name, "params": self.params}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def raw_gains(self) -> list[np.ndarray]:
        return [np.array(s.raw_gains) for s in self.specs]

    # constraint compilation ---------------------------------------------
    def compile(self, x, raw_gains=None, ids=None):
        """Halfspaces for a batch of states.

        Returns ``A`` (B, K, m), ``c`` (B, K) and the compiled barriers (for
        gain gradients). ``raw_gains`` overrides the specs' gains.
        """
        ids = range(self.n_constraints) if ids is None else ids
        x = np.atleast_2d(x)
        A, c, comp = [], [], []
        for j in ids:
            spec = self.specs[j]
            cb = compile_barrier(spec, self.system, x, strict=False)
            gains = spec.gains if raw_gains is None else np.logaddexp(0.0, raw_gains[j])
            A.append(cb.a)
            c.append(cb.threshold(gains))
            comp.append(cb)
        m = self.control_dim
        if not comp:
            return np.zeros((x.shape[0], 0, m)), np.zeros((x.shape[0], 0)), comp
        return np.stack(A, axis=1), np.stack(c, axis=1), comp

    def barrier_values(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.stack([s.barrier.value(x) for s in self.specs], axis=1)

    def step(self, x, u):
        return self.system.step(x, u, self.dt)

    # scenario-specific hooks --------------------------------------------
    def sample_episodes(self, rng: np.random.Generator, n: int) -> Episodes:
        raise NotImplementedError

    def reference(self, x, t: int, ctx) -> np.ndarray:
        raise NotImplementedError

    def features(self, x, t: int, ctx) -> np.ndarray:
        raise NotImplementedError

    def tracking_point(self, x) -> np.ndarray:
        """Planar point used for trajectory CSVs and final distance."""
        return np.atleast_2d(x)[:, :2]

    def target_point(self, t: int, ctx) -> np.ndarray:
        raise NotImplementedError


class NavigationScenario(Scenario):
    def sample_episodes(self, rng, n):
        p = self.params
        c0 = np.asarray(p["start_center"])
        xy = c0 + rng.uniform(-p["start_spread"], p["start_spread"], size=(n, 2))
        goal = np.asarray(p["goal"])
        head = np.arctan2(goal[1] - xy[:, 1], goal[0] - xy[:, 0]) + rng.uniform(-0.3, 0.3, n)
        v = rng.uniform(0.0, 0.5, n)
        x0 = np.column_stack([xy, head, v])
        return Episodes(x0, np.broadcast_to(goal, (n, 2)).copy())

    def reference(self, x, t, ctx):
        p = self.params
        x = np.atleast_2d(x)
        dx, dy = ctx[:, 0] - x[:, 0], ctx[:, 1] - x[:, 1]
        dist = np.hypot(dx, dy)
        gx, gy = dx / np.maximum(dist, 1e-9), dy / np.maximum(dist, 1e-9)
        hx, hy = gx.copy(), gy.copy()
        # steer around obstacles ahead along the tangent closest to the goal direction
        for ox, oy, r in p["obstacles"]:
            px, py = x[:, 0] - ox, x[:, 1] - oy
            rho = np.hypot(px, py)
            gap = rho - r
            ahead = (gx * -px + gy * -py) > 0
            w = np.where(ahead & (gap < p["detour_range"]), (1.0 - gap / p["detour_range"]) ** 2, 0.0) * 3.0
            tx, ty = -py / np.maximum(rho, 1e-9), px / np.maximum(rho, 1e-9)
            sgn = np.where(tx * gx + ty * gy >= 0, 1.0, -1.0)
            hx = hx + w * sgn * tx
            hy = hy + w * sgn * ty
        err = wrap_angle(np.arctan2(hy, hx) - x[:, 2])
        v_des = np.minimum(p["v_cruise"], 0.8 * dist)
        u = np.column_stack([2.0 * err, 1.5 * (v_des - x[:, 3])])
        return np.clip(u, -np.asarray(p["u_clip"]), p["u_clip"])

    def features(self, x, t, ctx):
        x = np.atleast_2d(x)
        return np.column_stack([x[:, 0] - ctx[:, 0], x[:, 1] - ctx[:, 1], np.cos(x[:, 2]), np.sin(x[:, 2]), x[:, 3]])

    def target_point(self, t, ctx):
        return ctx[:, :2]


class ManipulationScenario(Scenario):
    """Tip follows a piecewise-linear path start -> via -> end.

    ``ctx`` columns: start (2), via (2), end (2), elbow sign. Vias close to the
    base demand bends beyond the joint limits.
    """

    @property
    def arm(self) -> Manipulator:
        return self.system

    def _path(self, t, ctx):
        T = self.horizon * self.dt
        s = np.clip(np.asarray(t, dtype=float) * self.dt / (0.8 * T), 0.0, 1.0)
        s = s * s * (3.0 - 2.0 * s)
        p0, pm, p1 = ctx[:, 0:2], ctx[:, 2:4], ctx[:, 4:6]
        if np.ndim(s) == 0:
            s = np.full(ctx.shape[0], float(s))
        first = s < 0.5
        w = np.where(first, 2 * s, 2 * s - 1)[:, None]
        return np.where(first[:, None], p0 + w * (pm - p0), pm + w * (p1 - pm))

    def target_point(self, t, ctx):
        return self._path(t, ctx)

    def _ik_near(self, p, elbow, q_near):
        q1, q2 = self.arm.inverse_kinematics(p, elbow)
        q1 = q_near[:, 0] + wrap_angle(q1 - q_near[:, 0])
        q2 = q_near[:, 1] + wrap_angle(q2 - q_near[:, 1])
        return np.column_stack([q1, q2])

    def sample_episodes(self, rng, n):
        ang0 = rng.uniform(-0.4, 0.6, n)
        ang1 = rng.uniform(2.3, 3.3, n)
        r0 = rng.uniform(1.2, 1.8, n)
        r1 = rng.uniform(1.2, 1.8, n)
        angm = rng.uniform(0.8, 2.0, n)
        rm = rng.uniform(0.45, 1.5, n)
        elbow = rng.choice([-1.0, 1.0], n)
        pol = lambda r, a: np.column_stack([r * np.cos(a), r * np.sin(a)])
        ctx = np.column_stack([pol(r0, ang0), pol(rm, angm), pol(r1, ang1), elbow])
        q1, q2 = self.arm.inverse_kinematics(ctx[:, 0:2], elbow)
        x0 = np.column_stack([q1, np.zeros(n), q2, np.zeros(n)])
        return Episodes(x0, ctx)

    def reference(self, x, t, ctx):
        p = self.params
        x = np.atleast_2d(x)
        q = x[:, [0, 2]]
        qd = x[:, [1, 3]]
        q_ref = self._ik_near(self._path(t, ctx), ctx[:, 6], q)
        q_next = self._ik_near(self._path(t + 1, ctx), ctx[:, 6], q_ref)
        qd_ref = (q_next - q_ref) / self.dt
        u = p["kp"] * (q_ref - q) + p["kd"] * (qd_ref - qd)
        return np.clip(u, -np.asarray(p["u_clip"]), p["u_clip"])

    def features(self, x, t, ctx):
        x = np.atleast_2d(x)
        return np.column_stack([x, self._path(t, ctx)])

    def tracking_point(self, x):
        return self.arm.tip(x)

    def phi(self, x):
        x = np.atleast_2d(x)
        return wrap_angle(x[:, 2] - x[:, 0])


class DrivingScenario(Scenario):
    """Straight-road driving past two static obstacles.

    State is ``(s, d, mu, v, delta, s01, d01, s02, d02)``; the last four
    entries are obstacle positions that never move.
    """

    @property
    def car(self) -> CurvilinearBicycle:
        return self.system.base

    def sample_episodes(self, rng, n):
        s0 = rng.uniform(0.0, 10.0, n)
        d = rng.uniform(-0.5, 0.5, n)
        ds1 = rng.uniform(20.0, 30.0, n)
        ds2 = ds1 + rng.uniform(30.0, 40.0, n)
        off = lambda: rng.uniform(0.1, 1.5, n) * rng.choice([-1.0, 1.0], n)
        d1, d2 = off(), off()
        v = np.full(n, float(self.params["v_cruise"]))
        x0 = np.column_stack([s0, d, np.zeros(n), v, np.zeros(n), s0 + ds1, d1, s0 + ds2, d2])
        return Episodes(x0, np.zeros((n, 0)))

    def _lateral_target(self, x):
        p = self.params
        R, m = p["radius"], p["pass_margin"]
        s, d = x[:, 0], x[:, 1]
        target = np.zeros(x.shape[0])
        best = np.full(x.shape[0], np.inf)
        for si, di in ((5, 6), (7, 8)):
            gap = x[:, si] - s
            near = (gap > -R - 2.0) & (gap < 35.0) & (gap < best)
            side = np.where(x[:, di] >= 0.0, -1.0, 1.0)
            tgt = x[:, di] + side * (R + m)
            target = np.where(near, tgt, target)
            best = np.where(near, gap, best)
        return target

    def reference(self, x, t, ctx):
        p = self.params
        x = np.atleast_2d(x)
        d, mu, v, delta = x[:, 1], x[:, 2], x[:, 3], x[:, 4]
        # cascade: lateral offset -> lateral rate -> path heading -> steering angle
        ddot = np.clip(0.8 * (self._lateral_target(x) - d), -2.5, 2.5)
        psi_des = np.arcsin(np.clip(ddot / np.maximum(v, 1.0), -0.6, 0.6))
        beta, _ = self.car.slip(delta)
        delta_des = np.clip(1.0 * (psi_des - mu - beta), -0.4, 0.4)
        u1 = 5.0 * (delta_des - delta)
        u2 = 1.0 * (p["v_cruise"] - v)
        u = np.column_stack([u1, u2])
        return np.clip(u, -np.asarray(p["u_clip"]), p["u_clip"])

    def features(self, x, t, ctx):
        x = np.atleast_2d(x)
        return np.column_stack([x[:, 1], x[:, 2], x[:, 3], x[:, 4],
                                np.clip(x[:, 5] - x[:, 0], -20, 80) / 10.0, x[:, 6],
                                np.clip(x[:, 7] - x[:, 0], -20, 80) / 10.0, x[:, 8]])

    def tracking_point(self, x):
        return np.atleast_2d(x)[:, :2]

    def target_point(self, t, ctx):
        return np.zeros((ctx.shape[0], 2))

    def lane_margin(self, x):
        x = np.atleast_2d(x)
        return self.params["lane_half_width"] - np.abs(x[:, 1])


def make_scenario(name: str, overrides: dict | None = None) -> Scenario:
    if name not in DEFAULTS:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    p = _merge(DEFAULTS[name], overrides or {})
    posets = scenario_posets()
    g = p["gains"]
    if name == "navigation":
        specs = [_spec(f"obs{k}", CircleBarrier((0, 1), (ox, oy), r), 2, g["obstacle"])
                 for k, (ox, oy, r) in enumerate(p["obstacles"])]
        if len(specs) != 3:
            raise ValueError("the navigation poset has exactly three obstacles")
        return NavigationScenario(name, Unicycle(), specs, posets["navigation"], p, (0, 1, 2), (0, 1, 2), 5)
    if name == "manipulation":
        l1, l2 = p["links"]
        ox, oy, r = p["obstacle"]
        lo, hi = p["phi_limits"]
        if not lo < hi:
            raise ValueError("phi_min must be below phi_max")
        specs = [
            _spec("obstacle", TipBarrier(l1, l2, (ox, oy), r), 2, g["obstacle"]),
            _spec("joint_min", RelativeAngleBarrier(0, 2, lo, +1.0), 2, g["joint"]),
            _spec("joint_max", RelativeAngleBarrier(0, 2, hi, -1.0), 2, g["joint"]),
        ]
        # the expert tracks the tip reference and only avoids the obstacle
        return ManipulationScenario(name, Manipulator(l1, l2), specs, posets["manipulation"], p, (0,), (0,), 6)
    # driving
    car = CurvilinearBicycle(p["lr"], p["lf"], Track(tuple(p["track"]["breaks"]), tuple(p["track"]["curvatures"])))
    system = WithStaticContext(car, 4)
    lf, tau = p["lane_half_width"], p["centerline_tol"]
    vmin, vmax = p["speed_limits"]
    if not vmin < vmax:
        raise ValueError("v_min must be below v_max")
    obstacle = _spec("obstacle", NearestCircleBarrier((0, 1), ((5, 6), (7, 8)), p["radius"]), 2, g["obstacle"])
    lanes = [_spec("lane_left", AffineBarrier({1: -1.0}, lf), 2, g["lane"]),
             _spec("lane_right", AffineBarrier({1: 1.0}, lf), 2, g["lane"])]
    if p["levels"] == 2:
        specs = lanes + [obstacle]
        poset = posets["driving2"]
        return DrivingScenario(name, system, specs, poset, p, (2,), (2,), 8, phys_dim=5)
    specs = [
        _spec("cl_left", AffineBarrier({1: -1.0}, tau), 2, g["centerline"]),
        _spec("cl_right", AffineBarrier({1: 1.0}, tau), 2, g["centerline"]),
        _spec("v_min", AffineBarrier({3: 1.0}, -vmin), 1, g["speed"]),
        _spec("v_max", AffineBarrier({3: -1.0}, vmax), 1, g["speed"]),
    ] + lanes + [obstacle]
    return DrivingScenario(name, system, specs, posets["driving4"], p, (6,), (6,), 8, phys_dim=5)


def load_config(path: str | Path) -> dict:
    """Read a JSON scenario/run configuration."""
    with open(path) as fh:
        return json.load(fh)


def driving_barriers(x, params: dict | None = None, levels: int = 2) -> list[BarrierSpec]:
    """Barrier specs of the driving scenario; ``x`` is accepted for API symmetry."""
    del x
    return make_scenario("driving" if levels == 2 else "driving4", params).specs
