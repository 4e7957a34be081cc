"""Expert data generation, closed-loop rollouts, metrics and benchmark tables."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels, qp
from .composition import batch_override_events
from .learner import Dataset, TrainState, forward
from .systems import FrameSingularity

POLICIES = ("posetsafe_hard", "posetsafe_mixture", "expert", "qp_hard", "qp_slack", "e2e")


class EmptyTraces(ValueError):
    pass


class TerminatedNonFinite(FloatingPointError):
    pass


# ----------------------------------------------------------------- dataset


@dataclass
class ExpertRun:
    """Noise-free expert rollouts over a set of episodes."""

    states: np.ndarray  # (E, T + 1, n)
    controls: np.ndarray  # (E, T, m)
    features: np.ndarray  # (E, T, k)
    status: np.ndarray  # (E, T) expert status codes
    barriers: np.ndarray  # (E, T, N) barrier values at the control time

    def dataset(self) -> Dataset:
        """Training pairs, dropping steps where the exact expert QP failed."""
        E, T = self.status.shape
        ep = np.repeat(np.arange(E), T)
        t = np.tile(np.arange(T), E)
        keep = self.status.reshape(-1) == qp.EXPERT_OK
        return Dataset(ep[keep], t[keep], self.states[:, :-1].reshape(E * T, -1)[keep],
                       self.features.reshape(E * T, -1)[keep], self.controls.reshape(E * T, -1)[keep])


def run_expert(scenario, episodes, horizon: int | None = None, noise_frac: float = 0.0,
               seed: int = 0) -> ExpertRun:
    """Roll out the QP expert.

    With ``noise_frac > 0`` the executed control is the expert applied to a
    reference perturbed by uniform noise of ``noise_frac * u_clip``, while the
    recorded label is the expert's answer to the clean reference. The states
    then cover the neighbourhood a noisy closed loop visits.
    """
    T = scenario.horizon if horizon is None else int(horizon)
    x = episodes.x0.copy()
    E = x.shape[0]
    m = scenario.control_dim
    states = np.empty((E, T + 1, x.shape[1]))
    controls = np.empty((E, T, m))
    feats = np.empty((E, T, scenario.feature_dim))
    status = np.zeros((E, T), dtype=np.int64)
    bvals = np.empty((E, T, scenario.n_constraints))
    states[:, 0] = x
    rng = np.random.default_rng(seed)
    scale = float(noise_frac) * np.asarray(scenario.params["u_clip"], dtype=float)
    for t in range(T):
        feats[:, t] = scenario.features(x, t, episodes.ctx)
        bvals[:, t] = scenario.barrier_values(x)
        u_ref = scenario.reference(x, t, episodes.ctx)
        u, st = qp.expert_control_batch(scenario, x, u_ref)
        controls[:, t] = u
        status[:, t] = st
        if noise_frac > 0:
            u, _ = qp.expert_control_batch(scenario, x, u_ref + rng.uniform(-1.0, 1.0, (E, m)) * scale)
        x = scenario.step(x, u)
        states[:, t + 1] = x
    return ExpertRun(states, controls, feats, status, bvals)


def write_dataset_csv(scenario, run: ExpertRun, path) -> dict:
    """Expert trajectories as CSV; returns a small generation report."""
    E, T, _ = run.controls.shape
    n = run.states.shape[2]
    head = (["episode", "t"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(scenario.control_dim)]
            + [f"b_{name}" for name in scenario.names] + [f"z{i}" for i in range(scenario.feature_dim)]
            + ["status"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(head)
        for e in range(E):
            for t in range(T):
                w.writerow([e, t] + [repr(float(v)) for v in run.states[e, t]]
                           + [repr(float(v)) for v in run.controls[e, t]]
                           + [repr(float(v)) for v in run.barriers[e, t]]
                           + [repr(float(v)) for v in run.features[e, t]] + [int(run.status[e, t])])
    return {"episodes": int(E), "horizon": int(T), "rows": int(E * T),
            "expert_failures": int(np.sum(run.status != qp.EXPERT_OK))}


def read_dataset_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    if head[:2] != ["episode", "t"] or head[-1] != "status":
        raise ValueError(f"{path}: unexpected dataset header")
    data = np.array([[float(v) for v in r] for r in rows[1:]]) if len(rows) > 1 else np.zeros((0, len(head)))
    col = lambda p: [i for i, h in enumerate(head) if h.startswith(p) and h[len(p):].isdigit()]
    keep = data[:, -1] == qp.EXPERT_OK
    data = data[keep]
    return Dataset(data[:, 0].astype(np.int64), data[:, 1].astype(np.int64), data[:, col("x")],
                   data[:, col("z")], data[:, col("u")])


# ---------------------------------------------------------------- policies


@dataclass
class Policy:
    """A closed-loop controller. ``kind`` picks the safety mechanism.

    kinds: ``posetsafe`` (a trained :class:`TrainState`), ``expert``,
    ``qp_hard`` / ``qp_slack`` (a nominal network followed by a simultaneous
    QP over every constraint) and ``e2e`` (the nominal network alone).
    With ``control_bounds`` the QP baselines also carry the actuator box
    ``|u_i| <= u_clip_i`` as hard rows, as a QP safety layer would.
    """

    name: str
    kind: str
    state: TrainState | None = None
    slack_weight: float = 1e3
    control_bounds: bool = False

    def __post_init__(self):
        if self.kind not in ("posetsafe", "expert", "qp_hard", "qp_slack", "e2e"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind != "expert" and self.state is None:
            raise ValueError(f"policy {self.name} needs trained parameters")


@dataclass
class StepResult:
    u: np.ndarray
    feasible: np.ndarray
    events: list = field(default_factory=list)


def policy_step(policy: Policy, scenario, x, t, ctx, noise, stage: str) -> StepResult:
    """One control step for a batch of rollouts; ``noise`` (B, m) or None."""
    pre = noise if (noise is not None and stage == "pre") else None
    B = x.shape[0]
    if policy.kind == "expert":
        u_ref = scenario.reference(x, t, ctx)
        if pre is not None:
            u_ref = u_ref + pre
        u, status = qp.expert_control_batch(scenario, x, u_ref)
        feasible = status == qp.EXPERT_OK
        events = []
    elif policy.kind == "posetsafe":
        z = scenario.features(x, t, ctx)
        u, tape = forward(policy.state, scenario, x, z, nominal_noise=pre, record=True)
        feasible = ~tape.infeasible.astype(bool).any(axis=1)
        rows, mb, ma = batch_override_events(tape.A, tape.c, policy.state.orders, tape.steps)
        if policy.state.mode == "hard":
            sel = int(np.argmax(policy.state.logits))
            keep = rows[:, 1] == sel
            rows, mb, ma = rows[keep], mb[keep], ma[keep]
        events = [(int(r[0]), {"t": int(t), "head": int(r[1]), "step": int(r[2]), "enforced": int(r[3]),
                               "flipped": int(r[4]), "margin_before": float(b), "margin_after": float(a)})
                  for r, b, a in zip(rows, mb, ma)]
    else:
        z = scenario.features(x, t, ctx)
        u_nom, _ = forward(policy.state, scenario, x, z)
        if pre is not None:
            u_nom = u_nom + pre
        events = []
        if policy.kind == "e2e":
            u, feasible = u_nom, np.ones(B, dtype=bool)
        else:
            # the baseline layer uses the nominal model's (untrained, default) gains
            A, c, _ = scenario.compile(x, policy.state.raw_gains)
            if policy.control_bounds:
                A, c = with_box(A, c, scenario.params["u_clip"])
            w = policy.slack_weight if policy.kind == "qp_slack" else 0.0
            u, feasible = qp.solve_batch(u_nom, A, c, w)
            # an infeasible QP returns nothing usable; the nominal is applied
            u = np.where(feasible[:, None], u, u_nom)
    if noise is not None and stage == "post":
        u = u + noise
    return StepResult(np.asarray(u, dtype=float), np.asarray(feasible, dtype=bool), events)


def with_box(A, c, bound):
    """Append ``u_i >= -bound_i`` and ``-u_i >= -bound_i`` rows to a batch of halfspaces."""
    bound = np.asarray(bound, dtype=float)
    m = bound.shape[0]
    eye = np.eye(m)
    A_box = np.concatenate([eye, -eye])
    c_box = np.concatenate([-bound, -bound])
    B = A.shape[0]
    return (np.concatenate([A, np.broadcast_to(A_box, (B, 2 * m, m))], axis=1),
            np.concatenate([c, np.broadcast_to(c_box, (B, 2 * m))], axis=1))


# ---------------------------------------------------------------- rollouts


@dataclass
class RolloutTrace:
    policy: str
    seed: int
    episode: int
    states: np.ndarray  # (T + 1, n)
    controls: np.ndarray  # (T, m)
    barriers: np.ndarray  # (T + 1, N)
    feasible: np.ndarray  # (T,) bool
    events: list
    step_time: np.ndarray  # (T,) seconds per step (batch time / batch size)
    terminated: str | None = None

    @property
    def length(self) -> int:
        return self.controls.shape[0]

    @property
    def all_feasible(self) -> bool:
        return bool(np.all(self.feasible))

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"policy": self.policy, "seed": self.seed, "episode": self.episode,
                                 "terminated": self.terminated, "length": self.length}) + "\n")
            for t in range(self.length):
                fh.write(json.dumps({"t": t, "x": self.states[t].tolist(), "u": self.controls[t].tolist(),
                                     "b": self.barriers[t].tolist(), "feasible": bool(self.feasible[t])}) + "\n")
            for ev in self.events:
                fh.write(json.dumps({"event": ev}) + "\n")


def noise_scale_from(controls) -> np.ndarray:
    """Per-channel control scale: max |u| over the expert data."""
    c = np.asarray(controls).reshape(-1, np.shape(controls)[-1])
    return np.abs(c).max(axis=0)


def rollout_batch(scenario, policy: Policy, episodes, seeds: Sequence[int], *, noise_on: bool = True,
                  noise_scale=None, noise_stage: str = "pre", horizon: int | None = None) -> list[RolloutTrace]:
    """Run ``len(seeds)`` rollouts side by side; rollout k starts from episode k.

    Noise is uniform in ``[-frac * scale, frac * scale]`` per channel, drawn
    from a generator seeded by the rollout's own seed, so results do not
    depend on how rollouts are batched.
    """
    if noise_stage not in ("pre", "post"):
        raise ValueError("noise_stage must be 'pre' or 'post'")
    T = scenario.horizon if horizon is None else int(horizon)
    R = len(seeds)
    if len(episodes) != R:
        raise ValueError("one episode per seed")
    m = scenario.control_dim
    frac = float(scenario.params["noise_frac"])
    scale = np.ones(m) if noise_scale is None else np.asarray(noise_scale, dtype=float)
    noise = np.zeros((R, T, m))
    if noise_on:
        for k, s in enumerate(seeds):
            noise[k] = np.random.default_rng(int(s)).uniform(-1.0, 1.0, size=(T, m)) * frac * scale
    x = episodes.x0.copy()
    ctx = episodes.ctx
    states = np.full((R, T + 1, x.shape[1]), np.nan)
    controls = np.full((R, T, m), np.nan)
    bvals = np.full((R, T + 1, scenario.n_constraints), np.nan)
    feas = np.ones((R, T), dtype=bool)
    times = np.zeros((R, T))
    events: list[list] = [[] for _ in range(R)]
    live = np.ones(R, dtype=bool)
    reason: list[str | None] = [None] * R
    states[:, 0] = x
    bvals[:, 0] = scenario.barrier_values(x)
    for t in range(T):
        idx = np.nonzero(live)[0]
        if idx.size == 0:
            break
        xs = x[idx]
        t0 = time.perf_counter()
        try:
            res = policy_step(policy, scenario, xs, t, ctx[idx], noise[idx, t] if noise_on else None, noise_stage)
            x_next = scenario.step(xs, res.u)
        except FrameSingularity:
            for k in idx:
                try:
                    r1 = policy_step(policy, scenario, x[k:k + 1], t, ctx[k:k + 1],
                                     noise[k:k + 1, t] if noise_on else None, noise_stage)
                    scenario.step(x[k:k + 1], r1.u)
                except FrameSingularity:
                    live[k] = False
                    reason[k] = "frame_singularity"
            continue_idx = np.nonzero(live)[0]
            if continue_idx.size == 0:
                break
            idx = continue_idx
            xs = x[idx]
            res = policy_step(policy, scenario, xs, t, ctx[idx], noise[idx, t] if noise_on else None, noise_stage)
            x_next = scenario.step(xs, res.u)
        dt_wall = (time.perf_counter() - t0) / idx.size
        controls[idx, t] = res.u
        feas[idx, t] = res.feasible
        times[idx, t] = dt_wall
        for local, ev in res.events:
            events[idx[local]].append(ev)
        bad = ~np.all(np.isfinite(x_next), axis=1)
        x[idx] = x_next
        states[idx, t + 1] = x_next
        bvals[idx, t + 1] = scenario.barrier_values(x_next)
        for k in idx[bad]:
            live[k] = False
            reason[k] = "non_finite_state"
    traces = []
    for k in range(R):
        L = T
        if reason[k] is not None:
            L = int(np.sum(np.all(np.isfinite(controls[k]), axis=1)))
        traces.append(RolloutTrace(policy.name, int(seeds[k]), k, states[k, :L + 1], controls[k, :L],
                                   bvals[k, :L + 1], feas[k, :L], events[k], times[k, :L], reason[k]))
    return traces


def rollout(scenario, policy: Policy, episodes, seed: int, noise_on: bool = True, **kw) -> RolloutTrace:
    """Single rollout from the first episode in ``episodes``."""
    return rollout_batch(scenario, policy, episodes.take(slice(0, 1)), [seed], noise_on=noise_on, **kw)[0]


# ------------------------------------------------------------------ metrics


@dataclass
class MetricsReport:
    policy: str
    n_rollouts: int
    safety_min: float
    safety_mean: float
    mse_mean: float
    mse_var: float
    final_distance_mean: float
    feasibility: bool
    qp_success: float
    top_safety_guarantee: bool
    uncertainty: tuple[float, ...]
    rollout_time_avg: float
    audit_violations: int
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {
            "policy": self.policy,
            "n_rollouts": self.n_rollouts,
            "safety_min": self.safety_min,
            "safety_mean": self.safety_mean,
            "mse_mean": self.mse_mean,
            "mse_var": self.mse_var,
            "final_distance_mean": self.final_distance_mean,
            "feasibility": int(self.feasibility),
            "qp_success_pct": 100.0 * self.qp_success,
            "top_safety_guarantee": int(self.top_safety_guarantee),
            "rollout_time_avg": self.rollout_time_avg,
            "audit_violations": self.audit_violations,
        }
        for i, v in enumerate(self.uncertainty):
            out[f"uncertainty_u{i + 1}"] = v
        out.update(self.extra)
        return out


def _safety_series(scenario, trace: RolloutTrace) -> np.ndarray:
    return trace.barriers[:, list(scenario.safety_ids)].min(axis=1)


def evaluate(traces: Sequence[RolloutTrace], scenario, reference: Sequence[np.ndarray] | None = None,
             targets: Sequence[np.ndarray] | None = None) -> MetricsReport:
    """Aggregate metrics over rollouts.

    ``reference[k]`` is the noise-free expert state trajectory for trace k
    (for the tracking MSE); ``targets[k]`` the planar goal at the final step.
    """
    if not traces:
        raise EmptyTraces("no traces to evaluate")
    name = traces[0].policy
    per_min, per_mean = [], []
    for tr in traces:
        s = _safety_series(scenario, tr)
        per_min.append(s.min() if s.size else np.nan)
        per_mean.append(s.mean() if s.size else np.nan)
    safety_min = float(np.min(per_min))
    safety_mean = float(np.mean(per_mean))
    mses = []
    if reference is not None:
        for tr, ref in zip(traces, reference):
            L = min(tr.states.shape[0], ref.shape[0])
            p = scenario.tracking_point(tr.states[:L])
            q = scenario.tracking_point(ref[:L])
            mses.append(float(np.mean(np.sum((p - q) ** 2, axis=1))))
    mse_mean = float(np.mean(mses)) if mses else float("nan")
    mse_var = float(np.var(mses)) if mses else float("nan")
    if targets is not None:
        dists = [float(np.linalg.norm(scenario.tracking_point(tr.states[-1:])[0] - tg)) for tr, tg in zip(traces, targets)]
        final_dist = float(np.mean(dists))
    else:
        final_dist = float("nan")
    L = min(tr.length for tr in traces)
    if L > 0:
        U = np.stack([tr.controls[:L] for tr in traces])  # (K, L, m)
        unc = tuple(float(v) for v in U.std(axis=0).mean(axis=0))
    else:
        unc = tuple(float("nan") for _ in range(scenario.control_dim))
    feasible_runs = np.array([tr.all_feasible and tr.terminated is None for tr in traces])
    poset = scenario.poset
    violations = sum(1 for tr in traces for ev in tr.events if not poset.precedes(ev["flipped"], ev["enforced"]))
    extra = scenario_extras(scenario, traces)
    top = safety_min >= 0 and extra.get("phi_viol_max", 0.0) == 0.0
    return MetricsReport(name, len(traces), safety_min, safety_mean, mse_mean, mse_var, final_dist,
                         bool(feasible_runs.all()), float(feasible_runs.mean()), bool(top), unc,
                         float(np.mean([tr.step_time.sum() for tr in traces])), int(violations), extra)


def normal_alignment(scenario, traces) -> float:
    """Fraction of visited states where every incomparable pair has ``a_i . a_j >= 0``.

    An empirical, along-the-rollout check of the alignment condition behind
    non-interference; NaN when the poset has no incomparable pair.
    """
    n = scenario.n_constraints
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)
             if not scenario.poset.precedes(i, j) and not scenario.poset.precedes(j, i)]
    X = np.concatenate([tr.states for tr in traces]) if traces else np.zeros((0, 1))
    X = X[np.all(np.isfinite(X), axis=1)]
    if not pairs or X.shape[0] == 0:
        return float("nan")
    A, _, _ = scenario.compile(X)
    ii, jj = np.array(pairs).T
    dots = np.einsum("bkm,bkm->bk", A[:, ii], A[:, jj])
    return float(np.mean(np.all(dots >= -1e-12, axis=1)))


def scenario_extras(scenario, traces) -> dict:
    name = scenario.name
    out = {"normal_alignment_frac": normal_alignment(scenario, traces)}
    out.update(_named_extras(scenario, traces))
    return out


def _named_extras(scenario, traces) -> dict:
    name = scenario.name
    if name == "manipulation":
        lo, hi = scenario.params["phi_limits"]
        viol = [np.maximum(0.0, np.maximum(scenario.phi(tr.states) - hi, lo - scenario.phi(tr.states)))
                for tr in traces]
        allv = np.concatenate(viol)
        return {"phi_viol_mean": float(allv.mean()), "phi_viol_max": float(allv.max())}
    if name.startswith("driving"):
        lane = [scenario.lane_margin(tr.states) for tr in traces]
        ey = np.concatenate([np.abs(tr.states[:, 1]) for tr in traces])
        crash = np.array([np.any(tr.barriers[:, scenario.safety_ids[0]] < 0) for tr in traces])
        out = {
            "pass_pct": 100.0 * float(np.mean(~crash)),
            "crash_pct": 100.0 * float(np.mean(crash)),
            "lane_viol_min": float(min(l.min() for l in lane)),
            "lane_viol_mean": float(np.mean([l.mean() for l in lane])),
            "ey_mean": float(ey.mean()),
            "ey_var": float(ey.var()),
            "time_out_of_lane": float(np.mean(np.concatenate([l < 0 for l in lane]))),
            "rot_viol": float(np.mean([np.abs(tr.controls[:, 0]).mean() for tr in traces])),
        }
        if scenario.name == "driving4":
            vmin, vmax = scenario.params["speed_limits"]
            v = np.concatenate([tr.states[:, 3] for tr in traces])
            out["overspeed_frac"] = float(np.mean(v > vmax))
            out["underspeed_frac"] = float(np.mean(v < vmin))
        return out
    return {}


# --------------------------------------------------------------- benchmark


def write_rows_csv(rows: Sequence[dict], path) -> None:
    keys: list[str] = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n", restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_trajectories_csv(scenario, traces: Sequence[RolloutTrace], path) -> None:
    cols = ("s", "d") if scenario.name.startswith("driving") else ("x", "y")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rollout", "t", cols[0], cols[1]])
        for k, tr in enumerate(traces):
            pts = scenario.tracking_point(tr.states)
            for t, (a, b) in enumerate(pts):
                w.writerow([k, t, repr(float(a)), repr(float(b))])


def protocol(n_rollouts: int, n_episodes: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Episode index and noise seed for each rollout: episodes cycle, seeds are spawned."""
    ss = np.random.SeedSequence(seed)
    seeds = [int(c.generate_state(1)[0]) for c in ss.spawn(n_rollouts)]
    return np.arange(n_rollouts) % n_episodes, np.array(seeds, dtype=np.int64)


def benchmark(scenario, policies: Sequence[Policy], test_episodes, *, n_rollouts: int = 100, seed: int = 0,
              noise_scale=None, noise_stage: str = "pre", out_dir=None, horizon: int | None = None,
              log: Callable | None = None) -> tuple[list[dict], dict[str, list[RolloutTrace]]]:
    """Evaluate each policy over the same noisy rollout protocol.

    Writes ``bench.csv``, ``traces/<policy>/<seed>.jsonl`` and
    ``trajectories/<policy>.csv`` under ``out_dir`` when given.
    """
    ep_idx, seeds = protocol(n_rollouts, len(test_episodes), seed)
    eps = test_episodes.take(ep_idx)
    ref = run_expert(scenario, test_episodes, horizon)
    reference = [ref.states[i] for i in ep_idx]
    T = scenario.horizon if horizon is None else int(horizon)
    targets = list(scenario.target_point(T, eps.ctx))
    rows, all_traces = [], {}
    for pol in policies:
        traces = rollout_batch(scenario, pol, eps, seeds, noise_on=True, noise_scale=noise_scale,
                               noise_stage=noise_stage, horizon=horizon)
        rep = evaluate(traces, scenario, reference, targets)
        rows.append(rep.row())
        all_traces[pol.name] = traces
        if log:
            log(f"{pol.name}: safety_min={rep.safety_min:.3f} feasible={rep.feasibility} "
                f"qp_success={100 * rep.qp_success:.0f}% extra={rep.extra}")
        if out_dir is not None:
            tdir = Path(out_dir) / "traces" / pol.name
            tdir.mkdir(parents=True, exist_ok=True)
            for tr in traces:
                tr.to_jsonl(tdir / f"{tr.seed}.jsonl")
            jdir = Path(out_dir) / "trajectories"
            jdir.mkdir(parents=True, exist_ok=True)
            write_trajectories_csv(scenario, traces, jdir / f"{pol.name}.csv")
    if out_dir is not None:
        write_rows_csv(rows, Path(out_dir) / "bench.csv")
    return rows, all_traces


# ------------------------------------------------------------------- timing


def _random_instance(rng, B, N, m, H):
    A = rng.normal(size=(B, N, m))
    c = rng.normal(size=(B, N))
    U = rng.normal(size=(B, H, m))
    orders = np.stack([rng.permutation(N) for _ in range(H)]).astype(np.int64)
    return A, c, orders, U


def _best_time(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def timing_bench(batch_sizes: Sequence[int] = (1, 16, 128, 1024), heads: Sequence[int] = tuple(range(1, 11)),
                 n_constraints: int = 3, m: int = 2, repeats: int = 7, seed: int = 0,
                 step_batch: int = 128, layers: Sequence[int] = (5, 64, 32, 2)) -> dict:
    """Closed-form sequential projection vs. the active-set oracle, and head scaling.

    The head sweep times one full training step (every head's MLP forward
    and backward plus projection forward and backward) at ``step_batch``.
    """
    from .learner import Mlp

    rng = np.random.default_rng(seed)
    rows = []
    for B in batch_sizes:
        A, c, orders, U = _random_instance(rng, B, n_constraints, m, 1)
        # make the oracle's problem feasible: shift thresholds below a common point
        u0 = rng.normal(size=(B, m))
        c = np.minimum(c, np.einsum("bkm,bm->bk", A, u0))
        t_proj = _best_time(lambda: kernels.project_heads(A, c, orders, U), repeats)
        t_qp = _best_time(lambda: qp.solve_batch(U[:, 0], A, c), max(1, repeats // 2))
        rows.append({"kind": "batch", "batch": B, "heads": 1, "projection_s": t_proj, "oracle_s": t_qp,
                     "ratio": t_qp / t_proj})
    hs, ts = [], []
    for H in heads:
        A, c, orders, U = _random_instance(rng, step_batch, n_constraints, m, H)
        nets = [Mlp.init(list(layers), rng) for _ in range(H)]
        X = rng.normal(size=(step_batch, layers[0]))

        def step():
            outs, tapes = [], []
            for net in nets:
                o, a = net.forward(X)
                outs.append(o)
                tapes.append(a)
            Uh = np.stack(outs, axis=1)
            out, active, _, _ = kernels.project_heads(A, c, orders, Uh)
            G = out / step_batch
            G_U, _ = kernels.project_heads_backward(A, c, orders, active, G)
            for h, net in enumerate(nets):
                net.backward(tapes[h], G_U[:, h])

        t = _best_time(step, repeats)
        hs.append(H)
        ts.append(t)
        rows.append({"kind": "heads", "batch": step_batch, "heads": H, "step_s": t})
    hs_a, ts_a = np.array(hs, dtype=float), np.array(ts)
    slope, icept = np.polyfit(hs_a, ts_a, 1)
    pred = slope * hs_a + icept
    ss_res = float(np.sum((ts_a - pred) ** 2))
    ss_tot = float(np.sum((ts_a - ts_a.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"rows": rows, "heads_slope": float(slope), "heads_intercept": float(icept), "heads_r2": r2}
