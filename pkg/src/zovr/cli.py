"""Command line front-end.

Subcommands:
    run      execute one run (or a whole preset) and write CSVs
    compare  evaluate CSVs against a comparison criterion
    replay   reconstruct a checkpoint from a trajectory file
    verify   run the quick oracle battery

Exit codes: 0 success, 1 error or failed criterion, 2 diverged run.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import harness, oracles, trajectory
from .estimators import PerturbationSeed, perturb_in_place
from .memory import has_accounting_model
from .prng import fold
from .prng import normals as prng_normals


def _add_run_parser(sub):
    p = sub.add_parser("run", help="execute one optimization run or a preset")
    p.add_argument("--config", help="flat key=value config file; flags override it")
    p.add_argument("--preset", choices=sorted(harness.PRESETS),
                   help="run a named experiment preset instead of a single run")
    p.add_argument("--problem", choices=harness.PROBLEMS, default=None)
    p.add_argument("--optimizer", choices=("mezo", "mezo-svrg", "zo-svrg", "fo-sgd"),
                   default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--query-budget", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--anchor-batch", type=int, default=None)
    p.add_argument("--lr1", type=float, default=None)
    p.add_argument("--lr2", type=float, default=None)
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--q", type=int, default=None)
    p.add_argument("--kappa", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="CSV output path (or preset directory)")
    p.add_argument("--traj-out", default=None, help="trajectory output path")
    p.add_argument("--accounting-mode", choices=("store_g", "recompute_g", "naive"),
                   default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--n", type=int, default=None, help="problem sample count")
    p.add_argument("--d", type=int, default=None, help="problem dimension")
    p.add_argument("--noise-std", type=float, default=None)
    p.add_argument("--idx-images", default=None, help="IDX image file for --problem mlp")
    p.add_argument("--idx-labels", default=None, help="IDX label file for --problem mlp")


def _collect_settings(args) -> dict[str, str]:
    settings: dict[str, str] = {}
    if args.config:
        settings.update(harness.parse_config_file(args.config))
    overrides = {
        "problem": args.problem, "optimizer": args.optimizer, "steps": args.steps,
        "query_budget": args.query_budget, "b": args.batch_size,
        "anchor_batch": args.anchor_batch, "eta1": args.lr1, "eta2": args.lr2,
        "mu": args.mu, "q": args.q, "kappa": args.kappa, "alpha": args.alpha,
        "seed": args.seed, "n": args.n, "d": args.d, "noise_std": args.noise_std,
        "idx_images": args.idx_images, "idx_labels": args.idx_labels,
        "eval_every": args.eval_every,
    }
    for key, value in overrides.items():
        if value is not None:
            settings[key] = str(value)
    return settings


_PROBLEM_KEYS = {
    "ls": ("n", "d", "noise_std", "seed"),
    "logistic": ("n", "d", "separation", "seed"),
    "mlp": ("n", "seed", "idx_images", "idx_labels"),
}
_OPTIMIZER_KEYS = {
    "mezo": ("eta", "b", "mu", "p"),
    "mezo-svrg": ("eta1", "eta2", "q", "b", "anchor_batch", "mu", "p",
                  "kappa", "alpha", "window"),
    "zo-svrg": ("eta", "b", "q", "mu", "p"),
    "fo-sgd": ("eta", "b"),
}


def _spec_from_settings(settings: dict[str, str]) -> harness.RunSpec:
    problem = settings.get("problem", "ls")
    optimizer = settings.get("optimizer", "mezo-svrg")
    if optimizer not in _OPTIMIZER_KEYS:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if optimizer in ("mezo", "zo-svrg", "fo-sgd") and "eta" not in settings:
        if "eta1" in settings:
            settings["eta"] = settings["eta1"]
    problem_params = {k: settings[k] for k in _PROBLEM_KEYS.get(problem, ())
                      if k in settings and settings[k]}
    optimizer_params = {k: settings[k] for k in _OPTIMIZER_KEYS[optimizer]
                        if k in settings}
    steps = int(settings["steps"]) if "steps" in settings else None
    queries = int(settings["query_budget"]) if "query_budget" in settings else None
    if steps is None and queries is None:
        steps = 1000
    return harness.RunSpec(
        name=f"{problem}-{optimizer}", problem=problem,
        problem_params=problem_params, optimizer=optimizer,
        optimizer_params=optimizer_params,
        master_seed=int(settings.get("seed", 0)),
        max_steps=steps, max_queries=queries,
        accounting_mode=settings.get("accounting_mode"),
        eval_every=int(settings.get("eval_every", 0)))


def cmd_run(args) -> int:
    if args.preset:
        seed = args.seed if args.seed is not None else 0
        outdir = args.out or f"preset_{args.preset}"
        executions, report = harness.run_preset(
            args.preset, seed, outdir, query_budget=args.query_budget)
        for e in executions:
            print(f"{e.spec.name}: status={e.result.status} steps={len(e.result.records)} "
                  f"queries={e.result.total_queries} final_loss={e.final_loss:.6e} "
                  f"csv={e.csv_path}")
        if report is not None:
            print(report.render())
        if any(e.result.status == "diverged" for e in executions):
            return 2
        return 0 if all(e.result.status == "completed" for e in executions) else 1

    spec = _spec_from_settings(_collect_settings(args))
    execution = harness.execute(spec, out=args.out, traj_out=args.traj_out)
    result = execution.result
    print(f"status={result.status} steps={len(result.records)} "
          f"queries={result.total_queries} final_loss={execution.final_loss:.6e}")
    mode = spec.accounting_mode or _DEFAULT_ACCOUNTING.get(spec.optimizer)
    if has_accounting_model(spec.optimizer, mode):
        modeled = harness.account_memory(spec.optimizer, mode, execution.objective.d)
        measured = result.records[-1].peak_slots if result.records else 0
        print(f"memory model ({mode or 'base'}): {modeled} slots; "
              f"measured peak: {measured} slots")
    if result.reason:
        print(f"reason: {result.reason}")
    if result.status == "diverged":
        return 2
    return 0 if result.status == "completed" else 1


_DEFAULT_ACCOUNTING = {"mezo": None, "mezo-svrg": "store_g", "zo-svrg": "naive",
                       "fo-sgd": None}


def cmd_compare(args) -> int:
    rows = [harness.read_csv(p) for p in args.csv]
    for path, r in zip(args.csv, rows):
        print(f"{path} loss-vs-queries: {harness.curve_summary(r)}")
    crit = args.criterion
    if crit == "convergence":
        if len(rows) != 3:
            raise ValueError("convergence comparison needs mezo, mezo-svrg, fo-sgd CSVs")
        report = harness.compare_convergence(rows[0], rows[1], rows[2])
    elif crit == "batch-robustness":
        if len(rows) != 3:
            raise ValueError("batch-robustness needs mezo-small, mezo-large, "
                             "mezo-svrg-small CSVs")
        report = harness.compare_batch_robustness(rows[0], rows[1], rows[2])
    elif crit == "final-loss":
        if len(rows) != 2:
            raise ValueError("final-loss comparison needs exactly two CSVs")
        report = harness.compare_final_loss(rows[0], rows[1], "first", "second")
    else:  # gap: plain report of optimality gaps
        report = harness.CompareReport()
        for path, r in zip(args.csv, rows):
            try:
                report.note(f"{path}: final gap {harness.final_gap(r):.6e}")
            except ValueError:
                report.note(f"{path}: final loss "
                            f"{r[-1]['train_loss']:.6e} (no fstar)")
    print(report.render())
    return 0 if report.passed else 1


def cmd_replay(args) -> int:
    log = trajectory.load(args.traj)
    theta0 = np.load(args.theta0)
    theta = trajectory.replay(log, theta0, args.step)
    np.save(args.out, theta)
    print(f"wrote step-{args.step} checkpoint to {args.out}")
    return 0


def cmd_verify(args) -> int:
    """Quick oracle battery over the estimator identities."""
    from . import objectives

    ok = True

    def check(label, cond, detail=""):
        nonlocal ok
        print(f"[{'PASS' if cond else 'FAIL'}] {label}" + (f" ({detail})" if detail else ""))
        ok = ok and cond

    ls = objectives.make_least_squares(6, 5, noise_std=0.05, seed=1)
    worst = 0.0
    for probe in range(3):
        theta = 0.4 * prng_normals(fold(100, probe), 0, 5)
        for b in (1, 2, 3):
            dev = oracles.unbiasedness_check(
                ls, theta, PerturbationSeed(fold(probe, b)), b)
            worst = max(worst, dev)
    check("minibatch-average unbiasedness (exhaustive, n=6)", worst < 1e-12,
          f"max deviation {worst:.2e}")

    log32 = objectives.make_logistic(32, 6, seed=2)
    report = oracles.control_variate_check(
        log32, np.full(6, 0.2), np.full(6, -0.3), PerturbationSeed(9),
        pair_counts=(2000,), pair_seed=5)
    check("control variates sum to zero",
          report.sum_inf_norm < 1e-10 * max(report.max_u_inf_norm, 1e-300),
          f"sum {report.sum_inf_norm:.2e}")
    check("population cross-moment is zero",
          report.population_cross_moment < 1e-20)

    grad_norm = float(np.max(np.abs(ls.batch_grad(ls.w_ls, np.arange(ls.n)))))
    check("normal-equation solution is stationary", grad_norm < 1e-8,
          f"grad inf-norm {grad_norm:.2e}")

    theta = 1.0 + np.arange(1000, dtype=np.float64) / 1000.0
    snapshot = theta.copy()
    seed = PerturbationSeed(77)
    perturb_in_place(theta, seed, 1, 1e-3)
    perturb_in_place(theta, seed, -2, 1e-3)
    perturb_in_place(theta, seed, 1, 1e-3)
    rel = float(np.max(np.abs(theta - snapshot) / np.abs(snapshot)))
    check("perturb-restore returns parameters", rel < 1e-12, f"max rel err {rel:.2e}")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="zovr",
                                     description="zeroth-order optimization benchmark")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_parser(sub)

    p = sub.add_parser("compare", help="compare run CSVs against a criterion")
    p.add_argument("csv", nargs="+")
    p.add_argument("--criterion", default="gap",
                   choices=("gap", "convergence", "batch-robustness", "final-loss"))

    p = sub.add_parser("replay", help="reconstruct a checkpoint from a trajectory")
    p.add_argument("--traj", required=True)
    p.add_argument("--theta0", required=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--out", required=True)

    sub.add_parser("verify", help="run the oracle verification battery")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "compare":
            return cmd_compare(args)
        if args.command == "replay":
            return cmd_replay(args)
        return cmd_verify(args)
    except (ValueError, OSError, trajectory.TrajectoryError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
