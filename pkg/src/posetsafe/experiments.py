"""End-to-end pipelines: expert data, training, benchmark tables, order ablation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .learner import Curve, Dataset, TrainState, feature_stats, init_state, train
from .sim import ExpertRun, Policy, benchmark, noise_scale_from, run_expert

EXPERIMENT_DEFAULTS = {
    "navigation": {"train_episodes": 48, "test_episodes": 24, "epochs": 20, "batch_size": 256, "lr": 1e-3},
    "manipulation": {"train_episodes": 40, "test_episodes": 20, "epochs": 20, "batch_size": 256, "lr": 1e-3},
    "driving": {"train_episodes": 40, "test_episodes": 20, "epochs": 20, "batch_size": 256, "lr": 1e-3},
    "driving4": {"train_episodes": 40, "test_episodes": 20, "epochs": 20, "batch_size": 256, "lr": 1e-3},
}


def split_seeds(seed: int, n: int) -> list[int]:
    """Independent child seeds from one manifest seed."""
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(int(seed)).spawn(n)]


@dataclass
class Prepared:
    train_run: ExpertRun
    data: Dataset
    test_episodes: object
    noise_scale: np.ndarray


def prepare(scenario, *, train_episodes: int, test_episodes: int, seed: int) -> Prepared:
    s_train, s_test, s_noise = split_seeds(seed, 3)
    train_eps = scenario.sample_episodes(np.random.default_rng(s_train), train_episodes)
    test_eps = scenario.sample_episodes(np.random.default_rng(s_test), test_episodes)
    run = run_expert(scenario, train_eps, noise_frac=scenario.params["data_noise_frac"], seed=s_noise)
    return Prepared(run, run.dataset(), test_eps, noise_scale_from(run.controls))


def fit(scenario, data: Dataset, *, mode: str, seed: int, epochs: int = 20, batch_size: int = 256,
        lr: float = 1e-3, heads: int | None = None, orders=None, layers=None, learn_gains: bool = True,
        log: Callable | None = None) -> tuple[TrainState, Curve]:
    fm, fs = feature_stats(data.z)
    state = init_state(scenario, mode=mode, heads=heads, orders=orders, layers=layers, seed=seed,
                       feat_mean=fm, feat_std=fs, learn_gains=learn_gains)
    return train(state, scenario, data, epochs=epochs, batch_size=batch_size, lr=lr, log=log)


def standard_policies(scenario, data: Dataset, *, seed: int, epochs: int, batch_size: int, lr: float,
                      log: Callable | None = None) -> tuple[list[Policy], dict[str, Curve]]:
    """Poset-safe hard and mixture, plus the expert, the simultaneous-QP baselines and plain E2E."""
    s_hard, s_mix, s_e2e = split_seeds(seed, 3)
    kw = dict(epochs=epochs, batch_size=batch_size, lr=lr, log=log)
    hard, c_hard = fit(scenario, data, mode="hard", seed=s_hard, **kw)
    mix, c_mix = fit(scenario, data, mode="mixture", seed=s_mix, **kw)
    e2e, c_e2e = fit(scenario, data, mode="none", seed=s_e2e, **kw)
    policies = [
        Policy("posetsafe_hard", "posetsafe", hard),
        Policy("posetsafe_mixture", "posetsafe", mix),
        Policy("expert", "expert"),
        Policy("qp_hard", "qp_hard", e2e),
        Policy("qp_slack", "qp_slack", e2e, slack_weight=1e3),
        # slack-penalty sensitivity around the default weight
        Policy("qp_slack_w1e2", "qp_slack", e2e, slack_weight=1e2),
        Policy("qp_slack_w1e6", "qp_slack", e2e, slack_weight=1e6),
        Policy("e2e", "e2e", e2e),
    ]
    return policies, {"posetsafe_hard": c_hard, "posetsafe_mixture": c_mix, "e2e": c_e2e}


def run_benchmark(scenario, *, seed: int = 0, n_rollouts: int = 100, noise_stage: str = "pre",
                  out_dir=None, log: Callable | None = None, **overrides) -> dict:
    cfg = dict(EXPERIMENT_DEFAULTS.get(scenario.name, EXPERIMENT_DEFAULTS["navigation"]))
    cfg.update(overrides)
    s_data, s_train, s_eval = split_seeds(seed, 3)
    prep = prepare(scenario, train_episodes=cfg["train_episodes"], test_episodes=cfg["test_episodes"], seed=s_data)
    policies, curves = standard_policies(scenario, prep.data, seed=s_train, epochs=cfg["epochs"],
                                         batch_size=cfg["batch_size"], lr=cfg["lr"], log=log)
    rows, traces = benchmark(scenario, policies, prep.test_episodes, n_rollouts=n_rollouts, seed=s_eval,
                             noise_scale=prep.noise_scale, noise_stage=noise_stage, out_dir=out_dir, log=log)
    return {"rows": rows, "traces": traces, "curves": curves, "policies": policies, "prepared": prep}


# ------------------------------------------------------------------ ablation

ABLATION_VARIANTS = ("fix_order", "wrong_order", "hard", "mixture")


def ablation_heads(scenario, variant: str):
    """Mode, head orders, and whether gains are learned, per ablation variant.

    ``fix_order`` is a single hand-written extension with hand-set gains;
    ``wrong_order`` enforces the obstacle first so the lane constraints win.
    ``hard`` and ``mixture`` use every extension of the poset.
    """
    names = list(scenario.names)
    obstacle = names.index("obstacle")
    lower = [j for j in range(len(names)) if j != obstacle]
    if variant == "fix_order":
        return "hard", [lower + [obstacle]], False
    if variant == "wrong_order":
        return "hard", [[obstacle] + lower], False
    if variant == "hard":
        return "hard", None, True
    if variant == "mixture":
        return "mixture", None, True
    raise ValueError(f"unknown ablation variant {variant!r}")


def ablation_order(scenario, *, seed: int = 0, n_rollouts: int = 100, noise_stage: str = "pre", out_dir=None,
                   variants=ABLATION_VARIANTS, log: Callable | None = None, **overrides) -> dict:
    cfg = dict(EXPERIMENT_DEFAULTS["driving"])
    cfg.update(overrides)
    s_data, s_train, s_eval = split_seeds(seed, 3)
    prep = prepare(scenario, train_episodes=cfg["train_episodes"], test_episodes=cfg["test_episodes"], seed=s_data)
    policies, curves = [], {}
    for v, s in zip(variants, split_seeds(s_train, len(variants))):
        mode, orders, learn = ablation_heads(scenario, v)
        heads = None if orders is None else len(orders)
        state, curve = fit(scenario, prep.data, mode=mode, seed=s, heads=heads, orders=orders, learn_gains=learn,
                           epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], log=log)
        policies.append(Policy(v, "posetsafe", state))
        curves[v] = curve
    rows, traces = benchmark(scenario, policies, prep.test_episodes, n_rollouts=n_rollouts, seed=s_eval,
                             noise_scale=prep.noise_scale, noise_stage=noise_stage, out_dir=out_dir, log=log)
    return {"rows": rows, "traces": traces, "curves": curves, "policies": policies, "prepared": prep}
