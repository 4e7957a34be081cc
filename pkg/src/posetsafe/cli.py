"""Command line: ``posetsafe <command> [options]``.

Every command writes ``manifest.json`` next to its outputs. Passing that
file back through ``--config`` reproduces the run. Values from the config
file are defaults; flags given on the command line win.

Exit codes: 0 success, 1 usage or configuration error, 2 a ``--check``
failed, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_RUNTIME = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "POSETSAFE_OUTPUT_ROOT"
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS",
               "VECLIB_MAXIMUM_THREADS")

# defaults for every command option; the config file and flags override these
RUN_DEFAULTS = {
    "scenario": "navigation",
    "seed": 0,
    "overrides": {},
    "episodes": 10,
    "horizon": None,
    "data": None,
    "mode": "mixture",
    "heads": None,
    "epochs": 20,
    "batch_size": 256,
    "lr": 1e-3,
    "learn_gains": True,
    "checkpoint": None,
    "policy": "posetsafe",
    "rollouts": 100,
    "noise_stage": "pre",
    "train_episodes": None,
    "test_episodes": None,
    "batch_sizes": [1, 16, 128, 1024],
    "max_heads": 10,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _json_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="posetsafe", description=__doc__.split("\n")[0])
    p.add_argument("--output-root", default=None,
                   help=f"directory holding run outputs (default: ${OUTPUT_ROOT_ENV} or ./runs)")
    p.add_argument("--single-thread", action="store_true",
                   help="pin BLAS/OpenMP to one thread for byte-identical reruns")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def common(sp, scenario=True):
        # the global flags are accepted after the command too
        sp.add_argument("--output-root", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        sp.add_argument("--single-thread", action="store_true", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        sp.add_argument("--config", help="JSON run config, or a manifest.json from an earlier run")
        sp.add_argument("--out", help="output directory name under the output root (default: <command>-<scenario>)")
        sp.add_argument("--seed", type=int, help="manifest seed; every random stream is derived from it")
        if scenario:
            sp.add_argument("--scenario", choices=("navigation", "manipulation", "driving", "driving4"),
                            help="scenario name (default: navigation)")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override a scenario constant; VALUE is JSON, KEY may be dotted (gains.obstacle)")

    sp = sub.add_parser("gen-data", help="roll out the QP expert and write a dataset CSV")
    common(sp)
    sp.add_argument("--episodes", type=int, help="number of episodes (default: 10)")
    sp.add_argument("--horizon", type=int, help="steps per episode (default: the scenario horizon)")

    sp = sub.add_parser("train", help="fit a policy to a dataset CSV")
    common(sp)
    sp.add_argument("--data", help="dataset CSV from gen-data")
    sp.add_argument("--mode", choices=("mixture", "hard", "none"), help="head combiner; none trains the plain MLP")
    sp.add_argument("--heads", type=int, help="number of projection heads (default: per scenario)")
    sp.add_argument("--epochs", type=int, help="training epochs (default: 20)")
    sp.add_argument("--batch-size", type=int, help="minibatch size (default: 256)")
    sp.add_argument("--lr", type=float, help="Adam step size (default: 1e-3)")
    sp.add_argument("--fixed-gains", dest="learn_gains", action="store_const", const=False,
                    help="freeze the class-K gains at their initial values")

    sp = sub.add_parser("rollout", help="closed-loop rollouts of a checkpoint or the expert")
    common(sp)
    sp.add_argument("--checkpoint", help="checkpoint JSON from train (not needed for --policy expert)")
    sp.add_argument("--policy", choices=("posetsafe", "expert", "qp_hard", "qp_slack", "e2e"),
                    help="safety mechanism wrapped around the checkpoint (default: posetsafe)")
    sp.add_argument("--episodes", type=int, help="test episodes to sample (default: 10)")
    sp.add_argument("--rollouts", type=int, help="noisy rollouts, cycling over episodes (default: 100)")
    sp.add_argument("--noise-stage", choices=("pre", "post"), help="add noise before or after the safety layer")
    sp.add_argument("--horizon", type=int, help="steps per rollout (default: the scenario horizon)")

    for name, help_ in (("bench", "generate data, train every method and compare them"),
                        ("ablate", "driving priority-order ablation")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--rollouts", type=int, help="noisy rollouts per method (default: 100)")
        sp.add_argument("--train-episodes", type=int, help="expert episodes for training")
        sp.add_argument("--test-episodes", type=int, help="held-out episodes for evaluation")
        sp.add_argument("--epochs", type=int, help="training epochs (default: 20)")
        sp.add_argument("--noise-stage", choices=("pre", "post"), help="add noise before or after the safety layer")
        sp.add_argument("--check", action="store_true", help="exit 2 unless the qualitative claims hold")

    sp = sub.add_parser("timing", help="projection vs. QP oracle timing and head scaling")
    common(sp, scenario=False)
    sp.add_argument("--batch-sizes", type=_json_value, help="JSON list of batch sizes (default: [1,16,128,1024])")
    sp.add_argument("--max-heads", type=int, help="largest head count in the scaling sweep (default: 10)")
    sp.add_argument("--check", action="store_true", help="exit 2 unless ratio >= 2 at batch 128 and R^2 >= 0.95")

    sp = sub.add_parser("poset", help="list linear extensions and write the Hasse diagram")
    common(sp)
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then command-line flags."""
    cfg = json.loads(json.dumps(RUN_DEFAULTS))
    if getattr(args, "config", None):
        try:
            blob = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        blob = blob.get("config", blob)
        unknown = set(blob) - set(RUN_DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(blob)
    for key in RUN_DEFAULTS:
        if key == "overrides":
            continue
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(cfg["overrides"], k.strip(), _json_value(v))
    return cfg


def _output_dir(args, cfg) -> Path:
    root = Path(args.output_root or os.environ.get(OUTPUT_ROOT_ENV) or "runs")
    name = args.out or (args.command if args.command == "timing" else f"{args.command}-{cfg['scenario']}")
    out = root / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, args, cfg: dict, outputs: list[str], extra: dict | None = None) -> None:
    import numpy as np

    from . import kernels

    blob = {
        "command": args.command,
        "config": cfg,
        "outputs": sorted(outputs),
        "single_thread": bool(args.single_thread),
        "kernel_backend": kernels.BACKEND,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }
    if extra:
        blob.update(extra)
    (out / "manifest.json").write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n")


def _scenario(cfg):
    from .scenarios import make_scenario

    try:
        return make_scenario(cfg["scenario"], cfg["overrides"])
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid scenario configuration: {exc}") from None


# ------------------------------------------------------------------ commands


def cmd_gen_data(args, cfg, out: Path, log) -> dict:
    import numpy as np

    from .sim import run_expert, write_dataset_csv

    sc = _scenario(cfg)
    horizon = sc.horizon if cfg["horizon"] is None else int(cfg["horizon"])
    if horizon < 0 or cfg["episodes"] < 0:
        raise UsageError("episodes and horizon must be non-negative")
    if horizon == 0:
        log("warning: horizon 0 gives an empty dataset")
    s_eps, s_noise = (int(c.generate_state(1)[0]) for c in np.random.SeedSequence(cfg["seed"]).spawn(2))
    eps = sc.sample_episodes(np.random.default_rng(s_eps), int(cfg["episodes"]))
    run = run_expert(sc, eps, horizon, noise_frac=sc.params["data_noise_frac"], seed=s_noise)
    report = write_dataset_csv(sc, run, out / "dataset.csv")
    report["scenario_hash"] = sc.config_hash()
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log(f"wrote {report['rows']} rows, {report['expert_failures']} expert failures")
    return {"outputs": ["dataset.csv", "report.json"], "extra": {"scenario_hash": sc.config_hash()}}


def cmd_train(args, cfg, out: Path, log) -> dict:
    from .learner import feature_stats, init_state, save_checkpoint, train
    from .sim import read_dataset_csv

    if not cfg["data"]:
        raise UsageError("train needs --data")
    if not Path(cfg["data"]).exists():
        raise UsageError(f"dataset {cfg['data']} does not exist")
    sc = _scenario(cfg)
    data = read_dataset_csv(cfg["data"])
    fm, fs = feature_stats(data.z)
    state = init_state(sc, mode=cfg["mode"], heads=cfg["heads"], seed=cfg["seed"], feat_mean=fm, feat_std=fs,
                       learn_gains=cfg["learn_gains"])
    state, curve = train(state, sc, data, epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
                         lr=float(cfg["lr"]), log=log)
    save_checkpoint(state, out / "checkpoint.json")
    curve.write_csv(out / "curve.csv")
    return {"outputs": ["checkpoint.json", "curve.csv"], "extra": {"scenario_hash": sc.config_hash()}}


def cmd_rollout(args, cfg, out: Path, log) -> dict:
    import numpy as np

    from .learner import load_checkpoint
    from .sim import Policy, evaluate, protocol, rollout_batch, run_expert, write_rows_csv, write_trajectories_csv

    sc = _scenario(cfg)
    state = None
    if cfg["policy"] != "expert":
        if not cfg["checkpoint"]:
            raise UsageError(f"policy {cfg['policy']} needs --checkpoint")
        state = load_checkpoint(cfg["checkpoint"])
        if state.scenario_hash != sc.config_hash():
            raise UsageError("checkpoint was trained on a different scenario configuration")
    horizon = sc.horizon if cfg["horizon"] is None else int(cfg["horizon"])
    eps = sc.sample_episodes(np.random.default_rng(cfg["seed"]), int(cfg["episodes"]))
    ep_idx, seeds = protocol(int(cfg["rollouts"]), len(eps), cfg["seed"])
    run = run_expert(sc, eps, horizon)
    from .sim import noise_scale_from

    pol = Policy(cfg["policy"], cfg["policy"], state)
    traces = rollout_batch(sc, pol, eps.take(ep_idx), seeds, noise_on=True, noise_scale=noise_scale_from(run.controls),
                           noise_stage=cfg["noise_stage"], horizon=horizon)
    rep = evaluate(traces, sc, [run.states[i] for i in ep_idx], list(sc.target_point(horizon, eps.take(ep_idx).ctx)))
    write_rows_csv([rep.row()], out / "metrics.csv")
    write_trajectories_csv(sc, traces, out / "trajectories.csv")
    tdir = out / "traces"
    tdir.mkdir(exist_ok=True)
    for tr in traces:
        tr.to_jsonl(tdir / f"{tr.seed}.jsonl")
    log(f"safety_min={rep.safety_min:.4f} feasibility={rep.feasibility}")
    return {"outputs": ["metrics.csv", "trajectories.csv", "traces/"]}


def _experiment_overrides(cfg) -> dict:
    kw = {}
    for k in ("train_episodes", "test_episodes", "epochs"):
        if cfg.get(k) is not None:
            kw[k] = int(cfg[k])
    return kw


def cmd_bench(args, cfg, out: Path, log) -> dict:
    from .experiments import run_benchmark

    sc = _scenario(cfg)
    res = run_benchmark(sc, seed=cfg["seed"], n_rollouts=int(cfg["rollouts"]), noise_stage=cfg["noise_stage"],
                        out_dir=out, log=log, **_experiment_overrides(cfg))
    for name, curve in res["curves"].items():
        curve.write_csv(out / f"curve_{name}.csv")
    rows = {r["policy"]: r for r in res["rows"]}
    checks = {}
    for name in ("posetsafe_hard", "posetsafe_mixture"):
        r = rows[name]
        checks[f"{name}_feasible"] = bool(r["feasibility"])
        checks[f"{name}_safety_min_nonneg"] = r["safety_min"] >= 0
        if sc.name == "manipulation":
            checks[f"{name}_phi_violation_zero"] = r["phi_viol_mean"] == 0 and r["phi_viol_max"] == 0
    # reported alongside the checks; the simultaneous QP's success rate does not gate the exit code
    info = {"qp_hard_success_pct": rows["qp_hard"]["qp_success_pct"]}
    (out / "checks.json").write_text(json.dumps({"checks": checks, "info": info}, indent=2, sort_keys=True) + "\n")
    return {"outputs": ["bench.csv", "checks.json", "traces/", "trajectories/"]
            + [f"curve_{n}.csv" for n in res["curves"]], "checks": checks}


def cmd_ablate(args, cfg, out: Path, log) -> dict:
    from .experiments import ablation_order

    if cfg["scenario"] not in ("driving", "driving4"):
        raise UsageError("ablate runs on a driving scenario")
    sc = _scenario(cfg)
    res = ablation_order(sc, seed=cfg["seed"], n_rollouts=int(cfg["rollouts"]), noise_stage=cfg["noise_stage"],
                         out_dir=out, log=log, **_experiment_overrides(cfg))
    rows = {r["policy"]: r for r in res["rows"]}
    checks = {
        "wrong_order_crashes": rows["wrong_order"]["crash_pct"] > 0,
        "fix_hard_mixture_no_crash": all(rows[v]["crash_pct"] == 0 for v in ("fix_order", "hard", "mixture")),
        "fix_order_lane_worse_than_mixture": rows["fix_order"]["lane_viol_mean"] < rows["mixture"]["lane_viol_mean"],
    }
    info = {"rot_viol": {v: rows[v]["rot_viol"] for v in rows}}
    (out / "checks.json").write_text(json.dumps({"checks": checks, "info": info}, indent=2, sort_keys=True) + "\n")
    return {"outputs": ["bench.csv", "checks.json", "traces/", "trajectories/"], "checks": checks}


def cmd_timing(args, cfg, out: Path, log) -> dict:
    from .sim import timing_bench, write_rows_csv

    sizes = cfg["batch_sizes"]
    if not isinstance(sizes, list) or not sizes or not all(isinstance(b, int) and b > 0 for b in sizes):
        raise UsageError("--batch-sizes must be a JSON list of positive integers")
    res = timing_bench(batch_sizes=sizes, heads=tuple(range(1, int(cfg["max_heads"]) + 1)), seed=cfg["seed"])
    write_rows_csv(res["rows"], out / "timing.csv")
    ratio = {r["batch"]: r["ratio"] for r in res["rows"] if r["kind"] == "batch"}
    log(f"oracle/projection ratio {ratio}; heads slope {res['heads_slope']:.3e} s/head, R^2 {res['heads_r2']:.3f}")
    checks = {"heads_linear_r2": res["heads_r2"] >= 0.95}
    if 128 in ratio:
        checks["ratio_at_128"] = ratio[128] >= 2.0
    return {"outputs": ["timing.csv"], "checks": checks}


def cmd_poset(args, cfg, out: Path, log) -> dict:
    from .poset import enumerate_linear_extensions, format_poset, maximal_elements, to_dot

    sc = _scenario(cfg)
    ps = sc.poset
    exts = enumerate_linear_extensions(ps)
    print(format_poset(ps), end="")
    print("maximal: " + ", ".join(ps.label(i) for i in maximal_elements(ps)))
    print(f"{len(exts)} linear extensions (lowest priority first):")
    for e in exts:
        print("  " + " -> ".join(ps.label(i) for i in e))
    (out / "hasse.dot").write_text(to_dot(ps, sc.name))
    (out / "extensions.txt").write_text("".join(" ".join(str(i) for i in e) + "\n" for e in exts))
    return {"outputs": ["hasse.dot", "extensions.txt"]}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "timing": cmd_timing,
    "poset": cmd_poset,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.single_thread:
        for var in THREAD_VARS:
            os.environ[var] = "1"

    def log(msg):
        print(f"[{time.strftime('%H:%M:%S')}] {msg}", file=sys.stderr, flush=True)

    try:
        cfg = resolve_config(args)
        out = _output_dir(args, cfg)
        result = COMMANDS[args.command](args, cfg, out, log)
        _write_manifest(out, args, cfg, result["outputs"] + ["manifest.json"],
                        {"checks": result.get("checks"), **result.get("extra", {})})
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    checks = result.get("checks") or {}
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    if getattr(args, "check", False) and not all(checks.values()):
        return EXIT_CHECK
    print(f"outputs in {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
