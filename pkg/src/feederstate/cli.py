"""Command-line surface.

Subcommands:

    synth      write fixture files (network, truth, measurements) for a
               scenario spec, without running the estimator
    estimate   run the estimator on a network + measurement CSV
    eval       score a saved result against a saved truth fixture
    sweep      run a scenario matrix over seeds, write an aggregate CSV

Exit codes: 0 success (estimate: converged), 2 usage error,
3 estimate ran but did not converge, 4 estimation failed (solver error
or infeasible model).
"""

from __future__ import annotations

import argparse
import json
import pathlib
import sys

from . import load_corpus
from .estimator import (EstimationError, EstimationResult, EstimatorOptions,
                        estimate)
from .formulation import BigMConfig
from .harness import (ScenarioSpec, default_cases, load_truth_fixture,
                      run_scenario, score, sweep, synth_fixtures,
                      _node_error_csv)
from .measurements import MeasurementSet
from .network import load_network_file

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NONCONVERGED = 3
EXIT_FAILED = 4


def _load_net(path: str | None):
    return load_network_file(path) if path else load_corpus()


def _estimator_options(args) -> EstimatorOptions:
    base = BigMConfig()
    cfg = BigMConfig(M=args.big_m if args.big_m is not None else base.M,
                     theta=args.theta if args.theta is not None else base.theta)
    return EstimatorOptions(max_iter=args.max_iter, state_tol=args.state_tol,
                            outage_detection=not args.no_outage_detection,
                            bigm=cfg)


def _add_estimator_flags(p: argparse.ArgumentParser):
    p.add_argument("--max-iter", type=int, default=20,
                   help="outer-iteration cap (default 20)")
    p.add_argument("--state-tol", type=float, default=1e-6,
                   help="state convergence tolerance (default 1e-6)")
    p.add_argument("--big-m", type=float, default=None,
                   help="big-M constant for switch constraints")
    p.add_argument("--theta", type=float, default=None,
                   help="dead-band current threshold (p.u.)")
    p.add_argument("--no-outage-detection", action="store_true",
                   help="disable the outage dead-band constraints")


def _cmd_synth(args) -> int:
    spec = _load_spec(args.spec, args.seed)
    out = synth_fixtures(spec, args.out)
    print(f"wrote fixtures under {out}")
    return EXIT_OK


def _load_spec(path: str | None, seed: int | None) -> ScenarioSpec:
    if path:
        spec = ScenarioSpec.from_json(pathlib.Path(path).read_text())
    else:
        spec = default_cases()[0]
    if seed is not None:
        spec = ScenarioSpec(**{**spec.__dict__, "seed": seed})
    return spec


def _cmd_estimate(args) -> int:
    net = _load_net(args.network)
    ms = MeasurementSet.from_csv(pathlib.Path(args.measurements).read_text())
    opts = _estimator_options(args)
    try:
        result = estimate(net, ms, opts)
    except EstimationError as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    pathlib.Path(args.out).write_text(result.to_json() + "\n")
    print(f"wrote {args.out} "
          f"({'converged' if result.converged else 'NOT converged'} "
          f"in {result.iterations} iterations)")
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def _cmd_eval(args) -> int:
    net = _load_net(args.network)
    tstat, view = load_truth_fixture(pathlib.Path(args.truth).read_text())
    result = EstimationResult.from_json(pathlib.Path(args.result).read_text())
    report = score(net, tstat, view, result)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "node_errors.csv").write_text(_node_error_csv(net, view, result))
    print(f"M1={report.m1:.2f} M2={report.m2:.2f} "
          f"captured={report.captured_load_pct:.2f} "
          f"vmag_max={report.vmag_max_pct:.4f}% "
          f"vang_max={report.vang_max_rad:.2e} rad")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    if args.spec:
        docs = json.loads(pathlib.Path(args.spec).read_text())
        cases = [ScenarioSpec.from_json(json.dumps(d)) for d in docs]
    else:
        cases = default_cases()
    seeds = list(range(args.seeds))
    reports, agg = sweep(cases, seeds, out_dir=args.out, workers=args.workers)
    print(agg, end="")
    bad = [r for r in reports if not r.converged]
    if bad:
        print(f"{len(bad)} runs did not converge", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="feederstate",
        description="Feeder topology, outage, and state estimation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="write scenario fixture files")
    sp.add_argument("--spec", help="ScenarioSpec JSON file (default: normal case)")
    sp.add_argument("--seed", type=int, default=None, help="override spec seed")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(fn=_cmd_synth)

    sp = sub.add_parser("estimate", help="run the estimator on files")
    sp.add_argument("--network", help="network JSON (default: shipped corpus)")
    sp.add_argument("--measurements", required=True, help="measurement CSV")
    sp.add_argument("--out", required=True, help="result JSON path")
    _add_estimator_flags(sp)
    sp.set_defaults(fn=_cmd_estimate)

    sp = sub.add_parser("eval", help="score a result against truth")
    sp.add_argument("--network", help="network JSON (default: shipped corpus)")
    sp.add_argument("--truth", required=True, help="truth fixture JSON")
    sp.add_argument("--result", required=True, help="estimation result JSON")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(fn=_cmd_eval)

    sp = sub.add_parser("sweep", help="run a scenario matrix over seeds")
    sp.add_argument("--spec", help="JSON list of ScenarioSpec objects "
                                   "(default: built-in case suite)")
    sp.add_argument("--seeds", type=int, default=1,
                    help="number of seeds, 0..N-1 (default 1)")
    sp.add_argument("--out", help="output directory for run artifacts")
    sp.add_argument("--workers", type=int, default=1,
                    help="parallel worker processes (default 1)")
    sp.set_defaults(fn=_cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
