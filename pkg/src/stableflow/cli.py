"""Command-line interface: data generation, training, evaluation, rollouts,
stability verification, and SVG figures.

Exit codes: 0 success, 1 usage error, 2 validation error (bad inputs or
files), 3 numerical/training error. Every run writes a machine-readable
summary JSON next to its main output (``<out>.summary.json``) recording the
resolved arguments, seeds, and SHA-256 hashes of the input files.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys

import numpy as np

from . import autodiff as ad
from .datasets import (
    GoToTaskSpec,
    MorphingCycleSpec,
    gen_cycle_dataset,
    gen_goto_dataset,
    gen_obstacle_dataset,
    read_dataset,
    write_dataset,
)
from .errors import (
    DatasetFormatError,
    NumericalError,
    StableFlowError,
    ValidationError,
)
from .plotting import render_field_svg, render_grid_svg, render_timeseries_svg
from .policy import ContextDynamics, Rollout, StablePolicyModel
from .training import TrainConfig, dataset_nll, evaluate, train

USAGE_ERROR, VALIDATION_ERROR, NUMERICAL_ERROR = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _hash_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_summary(out_path, command: str, args: dict, inputs: list, extra: dict) -> None:
    summary = {
        "command": command,
        "args": {k: v for k, v in args.items() if k != "func"},
        "inputs": {str(p): _hash_file(p) for p in inputs},
        **extra,
    }
    with open(f"{out_path}.summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)


def _parse_floats(text: str, name: str) -> np.ndarray:
    try:
        return np.array([float(tok) for tok in text.split(",") if tok != ""])
    except ValueError as exc:
        raise ValidationError(f"could not parse {name} {text!r}: {exc}") from exc


def _parse_perturb(specs) -> list:
    out = []
    for spec in specs or ():
        if ":" not in spec:
            raise ValidationError(f"perturbation {spec!r} must look like step:dx,dy,...")
        step_txt, vec_txt = spec.split(":", 1)
        try:
            step = int(step_txt)
        except ValueError as exc:
            raise ValidationError(f"bad perturbation step in {spec!r}") from exc
        out.append((step, _parse_floats(vec_txt, "perturbation displacement")))
    return out


# -- subcommands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.task == "cycle":
        contexts = [float(t) for t in args.contexts.split(",")]
        specs = [MorphingCycleSpec(base_radius=args.base_radius, amplitude=args.amplitude,
                                   lobes=args.lobes, context=c,
                                   angular_speed=args.angular_speed, noise=args.noise,
                                   samples_per_revolution=args.samples_per_rev,
                                   revolutions=args.revolutions)
                 for c in contexts]
        ds = gen_cycle_dataset(specs, n_traj=args.n_traj, seed=args.seed)
    elif args.task == "obstacle":
        ds = gen_obstacle_dataset(n_scenes=args.n_traj, seed=args.seed, noise=args.noise)
    else:
        spec = GoToTaskSpec(n_traj=args.n_traj, n_steps=args.goto_steps, noise=args.noise)
        ds = gen_goto_dataset(spec, seed=args.seed)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} trajectories ({ds.n_transitions} transitions) to {args.out}")
    _write_summary(args.out, "gen-data", vars(args), [],
                   {"n_trajectories": len(ds), "n_transitions": ds.n_transitions,
                    "outputs": [args.out]})
    return 0


def cmd_train(args) -> int:
    dataset = read_dataset(args.data)
    if args.config:
        with open(args.config) as fh:
            try:
                cfg_obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"malformed config: {exc}") from exc
        config = TrainConfig.from_json(cfg_obj)
    else:
        config = TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    model, report = train(config, dataset)
    model.save(args.out)
    report_path = f"{args.out}.report.json"
    with open(report_path, "w") as fh:
        json.dump(report.to_json(), fh, indent=1)
    with open(f"{args.out}.report.csv", "w") as fh:
        fh.write(report.to_csv())
    final_train = report.train_ll[-1] if report.train_ll else None
    final_test = report.test_ll[-1] if report.test_ll else None
    print(f"trained {len(report.train_ll)} epochs "
          f"(best epoch {report.best_epoch}); final train ll/transition "
          f"{final_train}, test {final_test}")
    inputs = [args.data] + ([args.config] if args.config else [])
    _write_summary(args.out, "train", vars(args), inputs,
                   {"config": config.to_json(), "best_epoch": report.best_epoch,
                    "param_checksum": report.param_checksum,
                    "wall_clock_s": report.wall_clock_s,
                    "outputs": [args.out, report_path]})
    return 0


def cmd_eval(args) -> int:
    model = StablePolicyModel.load(args.model)
    dataset = read_dataset(args.data)
    result = evaluate(model, dataset)
    with open(args.out, "w") as fh:
        json.dump(result, fh, indent=1)
    print(f"mean log likelihood/transition: {result['mean']:.4f} "
          f"over {len(result['per_trajectory'])} trajectories")
    _write_summary(args.out, "eval", vars(args), [args.model, args.data],
                   {"mean_log_likelihood": result["mean"], "outputs": [args.out]})
    return 0


def cmd_rollout(args) -> int:
    model = StablePolicyModel.load(args.model)
    y0 = _parse_floats(args.start, "--start")
    if args.context_dyn:
        target_txt, _, rate_txt = args.context_dyn.rpartition(":")
        if not target_txt:
            raise ValidationError("--context-dyn must look like c1,c2,...:rate")
        target = _parse_floats(target_txt, "--context-dyn target")
        try:
            rate = float(rate_txt)
        except ValueError as exc:
            raise ValidationError(f"bad rate in --context-dyn {args.context_dyn!r}") from exc
        dyn = ContextDynamics("exponential-approach", target=target, rate=rate)
        context0 = (_parse_floats(args.context, "--context")
                    if args.context else np.zeros_like(target))
    else:
        dyn = ContextDynamics("constant")
        context0 = (_parse_floats(args.context, "--context")
                    if args.context else model.standardization.c_shift.copy())
    rollout = model.rollout(y0, dyn, args.steps, np.random.default_rng(args.seed),
                            perturbations=_parse_perturb(args.perturb),
                            context0=context0)
    rollout.save(args.out)
    dist = float(ad.value_of(model.attractor_distance(
        rollout.states[-1], rollout.contexts[-1] if model.context_dim else None)))
    print(f"rolled out {args.steps} steps; terminal attractor distance {dist:.4g}")
    _write_summary(args.out, "rollout", vars(args), [args.model],
                   {"terminal_attractor_distance": dist, "outputs": [args.out]})
    return 0


def cmd_verify(args) -> int:
    model = StablePolicyModel.load(args.model)
    rng = np.random.default_rng(args.seed)
    context = model.standardization.c_shift.copy() if model.context_dim else None

    reports = {}
    passed = True
    for label, deterministic in (("noise_free", True), ("as_trained", False)):
        rep = model.verify_convergence(args.n_starts, args.radius, args.steps,
                                       args.tol, rng, context=context,
                                       deterministic=deterministic)
        rep["pass"] = rep["fraction_converged"] >= 0.99
        passed = passed and rep["pass"]
        reports[f"convergence_{label}"] = rep

    gen_tol = 1e-3
    h = 1e-4
    diffs = []
    spread = 2.0 * model.standardization.y_scale
    for _ in range(args.gen_points):
        y = model.standardization.y_shift + rng.standard_normal(model.dim) * spread
        _, _, diff = model.verify_generator_identity(y, context, h=h)
        diffs.append(diff)
    gen_rep = {
        "n_points": args.gen_points, "h": h, "tolerance": gen_tol,
        "max_abs_diff": float(np.max(diffs)), "median_abs_diff": float(np.median(diffs)),
        "pass": bool(np.max(diffs) < gen_tol),
    }
    passed = passed and gen_rep["pass"]
    reports["generator_identity"] = gen_rep

    report = {"model": str(args.model), "pass": passed, **reports}
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=1)
    for name, rep in reports.items():
        print(f"{name}: {'PASS' if rep['pass'] else 'FAIL'}")
    _write_summary(args.out, "verify", vars(args), [args.model],
                   {"pass": passed, "outputs": [args.out]})
    return 0 if passed else NUMERICAL_ERROR


def cmd_plot(args) -> int:
    if args.kind == "timeseries":
        if not args.rollout:
            raise ValidationError("timeseries plots need --rollout")
        with open(args.rollout) as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"malformed rollout: {exc}") from exc
        rollout = Rollout.from_json(obj)
        svg = render_timeseries_svg(rollout.states, perturbations=rollout.perturbations)
        inputs = [args.rollout]
    else:
        if not args.model:
            raise ValidationError(f"{args.kind} plots need --model")
        model = StablePolicyModel.load(args.model)
        demonstrations = []
        obstacles = None
        obstacle_radius = None
        context = None
        inputs = [args.model]
        if args.data:
            dataset = read_dataset(args.data)
            demonstrations = [t.states for t in dataset.trajectories[:8]]
            context = dataset.trajectories[0].contexts[0]
            if dataset.provenance.get("generator") == "obstacle":
                obstacles = context[:6].reshape(3, 2)
                obstacle_radius = dataset.provenance.get("obstacle_radius")
            inputs.append(args.data)
        rollouts = []
        if args.rollout:
            with open(args.rollout) as fh:
                rollouts = [np.asarray(json.load(fh)["states"])]
            inputs.append(args.rollout)
        if args.kind == "field":
            svg = render_field_svg(model, context=context,
                                   demonstrations=demonstrations, rollouts=rollouts)
        else:
            svg = render_grid_svg(model, context=context, obstacles=obstacles,
                                  obstacle_radius=obstacle_radius)
    with open(args.out, "w") as fh:
        fh.write(svg)
    print(f"wrote {args.kind} plot to {args.out}")
    _write_summary(args.out, "plot", vars(args), inputs, {"outputs": [args.out]})
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="stableflow",
                     description="Stable context-conditioned stochastic dynamics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--task", required=True, choices=["cycle", "obstacle", "goto"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-traj", type=int, default=10)
    p.add_argument("--contexts", default="0.0,1.0", help="cycle task contexts")
    p.add_argument("--base-radius", type=float, default=1.0)
    p.add_argument("--amplitude", type=float, default=0.3)
    p.add_argument("--lobes", type=int, default=5)
    p.add_argument("--angular-speed", type=float, default=1.0)
    p.add_argument("--samples-per-rev", type=int, default=48)
    p.add_argument("--revolutions", type=float, default=2.0)
    p.add_argument("--goto-steps", type=int, default=80)
    p.add_argument("--noise", type=float, default=0.01)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit a model by exact maximum likelihood")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="log likelihood of a dataset under a model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="simulate the fitted dynamics")
    p.add_argument("--model", required=True)
    p.add_argument("--start", required=True, help="comma-separated start state")
    p.add_argument("--context", default=None, help="comma-separated context")
    p.add_argument("--context-dyn", default=None,
                   help="exponential approach 'c1,c2,...:rate'")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb", action="append", default=None,
                   help="repeatable 'step:dx,dy,...' displacement")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("verify", help="numerical stability verification suites")
    p.add_argument("--model", required=True)
    p.add_argument("--n-starts", type=int, default=200)
    p.add_argument("--radius", type=float, default=10.0)
    p.add_argument("--tol", type=float, default=1e-2)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--gen-points", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("plot", help="emit SVG figures")
    p.add_argument("--kind", required=True, choices=["field", "grid", "timeseries"])
    p.add_argument("--model", default=None)
    p.add_argument("--rollout", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    try:
        return args.func(args)
    except (ValidationError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return VALIDATION_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return VALIDATION_ERROR
    except (NumericalError, StableFlowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
