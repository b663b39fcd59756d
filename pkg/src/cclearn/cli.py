"""Command-line interface: ``cclearn <command> [options]``.

Exit codes: 0 on success, 2 for usage or validation errors, 3 when a fit
degenerates numerically.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from typing import Sequence

from . import simlab
from .engine import DynamicRegime, backward_fit, replicate_workers
from .errors import DegenerateFitError, InvalidArgumentError
from .formats import config_document, parse_model_config, read_dataset, write_dataset

log = logging.getLogger("cclearn")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DEGENERATE = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _write_text(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
        return
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _load_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{path}: invalid JSON ({exc})") from None


def _load_regime(path: str) -> DynamicRegime:
    doc = _load_json(path)
    try:
        return DynamicRegime.from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise InvalidArgumentError(f"{path}: malformed regime document ({exc})") from None


# -- commands ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    c0 = args.c0 if args.c0 is not None else simlab.C0_FOR_RATE.get(args.scenario, {}).get(args.cr)
    if c0 is None:
        raise InvalidArgumentError(f"no default c0 for scenario {args.scenario} at CR={args.cr}; pass --c0")
    cfg = simlab.ScenarioConfig(args.scenario, args.n, c0, args.r, args.seed)
    data = simlab.generate(cfg)
    write_dataset(args.out, data, simlab.covariate_names(args.scenario), form=args.form)
    if args.config_out:
        variant = "I" if args.form == 1 else "II"
        fit = simlab.scenario_fit_config(args.scenario, variant, "D", args.seed)
        _write_text(args.config_out, json.dumps(config_document(fit), indent=2) + "\n")
    censored = sum(1 - t.event for t in data) / len(data)
    log.info("wrote %d subjects to %s (censoring rate %.3f)", len(data), args.out, censored)
    return EXIT_OK


def cmd_fit(args) -> int:
    dataset = read_dataset(args.data)
    doc = _load_json(args.config)
    if args.seed is not None:
        doc = dict(doc, seed=args.seed)
    model = parse_model_config(doc, dataset)
    regime = backward_fit(dataset.trajectories, model.fit)
    if model.categories:
        regime.diagnostics["categories"] = model.categories
    _write_text(args.out, regime.to_json() + "\n")
    for stage in regime.diagnostics["stages"]:
        log.info("stage %d: %s", stage["stage"], stage)
    return EXIT_OK


def _report_table(name: str, report: simlab.EvalReport) -> str:
    rows = [
        ("policy", name),
        ("n_test", str(report.n_test)),
        ("V_hat", f"{report.v_hat:.4f}"),
        ("SE(V_hat)", f"{report.se_v_hat:.4f}"),
        ("AA1", f"{report.aa1:.4f}"),
        ("AA2", f"{report.aa2:.4f}"),
        ("AA", f"{report.aa:.4f}"),
        ("V_opt", f"{report.v_opt:.4f}"),
        ("V_random", f"{report.v_random:.4f}"),
        ("V_behavior", f"{report.v_behavior:.4f}"),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def cmd_evaluate(args) -> int:
    if args.baseline == "none":
        if args.regime is None:
            raise InvalidArgumentError("--regime is required unless --baseline is given")
        policy, name = _load_regime(args.regime), args.regime
    elif args.baseline == "optimal":
        policy, name = simlab.true_optimal_regime(args.scenario), "optimal"
    elif args.baseline == "random":
        policy, name = simlab.UniformRandomPolicy(None), "random"
    else:
        policy, name = simlab.BehaviorPolicy(args.scenario, None), "behavior"
    report = simlab.evaluate_regime(policy, args.scenario, args.n_test, args.seed, noise=args.noise)
    print(_report_table(name, report))
    if args.out:
        buf = io.StringIO()
        row = dict(policy=name, scenario=args.scenario, **report.as_row())
        writer = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow(row)
        _write_text(args.out, buf.getvalue())
    return EXIT_OK


def cmd_benchmark(args) -> int:
    rows = simlab.parse_row_spec(args.table, args.rows)
    workers = args.workers if args.workers is not None else replicate_workers()
    summaries = []
    for row in rows:
        s = simlab.run_benchmark(row, args.reps, args.seed, args.n_test, workers)
        log.info(
            "scenario %d n=%d CR=%d %s/%s: AA=%.3f V=%.3f (%d/%d ok)",
            row.scenario, row.n, row.cr, row.variant, row.induction, s.aa, s.v_hat, s.n_ok, s.reps,
        )
        summaries.append(s)
    _write_text(args.out, simlab.summaries_to_csv(summaries))
    return EXIT_OK


def cmd_export_tree(args) -> int:
    regime = _load_regime(args.regime)
    if not 1 <= args.stage <= regime.K:
        raise InvalidArgumentError(f"--stage {args.stage} outside 1..{regime.K}")
    tree = regime.stage_trees[args.stage - 1]
    categories = regime.diagnostics.get("categories", {})
    names = {col: {float(code): label for label, code in m.items()} for col, m in categories.items()}
    if args.format == "text":
        text = tree.to_text(names)
    elif args.format == "dot":
        text = tree.to_dot(names)
    else:
        text = json.dumps(tree.to_dict(), indent=2, sort_keys=True)
    _write_text(None, text)
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cclearn", description="Tree-based dynamic treatment regimes for censored survival data.")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate a scenario dataset as wide CSV")
    p.add_argument("--scenario", type=int, choices=[1, 2], required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--c0", type=float, help="censoring upper bound (default: the 10%%/20%% value for --cr)")
    p.add_argument("--cr", type=int, choices=[10, 20], default=10, help="target censoring rate when --c0 is omitted")
    p.add_argument("--r", type=float, default=1.0, help="probability of entering stage 2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--form", type=int, choices=[1, 2], default=1, help="2 omits intermediate rewards")
    p.add_argument("--out", required=True)
    p.add_argument("--config-out", help="also write the scenario's model config JSON here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a regime from a dataset and a model config")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="counterfactual evaluation on a simulated test set")
    p.add_argument("--regime")
    p.add_argument("--scenario", type=int, choices=[1, 2], required=True)
    p.add_argument("--n-test", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--baseline", choices=["none", "optimal", "random", "behavior"], default="none")
    p.add_argument("--noise", action="store_true", help="keep outcome noise in the rollout")
    p.add_argument("--out", help="also write the report as CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="Monte Carlo replicates of simulate, fit and evaluate")
    p.add_argument("--table", type=int, choices=[1, 2], required=True, help="scenario number")
    p.add_argument("--rows", required=True, help='e.g. "n=1000,cr=10,variant=I,induction=D,r=1;n=500"')
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-test", type=int, default=10000)
    p.add_argument("--workers", type=int, help="process count (default: CCL_THREADS or 1)")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("export-tree", help="render one stage's tree")
    p.add_argument("--regime", required=True)
    p.add_argument("--stage", type=int, required=True)
    p.add_argument("--format", choices=["text", "dot", "json"], default="text")
    p.set_defaults(func=cmd_export_tree)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DegenerateFitError as exc:
        print(f"cclearn: degenerate fit: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (InvalidArgumentError, OSError) as exc:
        print(f"cclearn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
