"""Command-line entry point: ``drift-forge {run,suite,synth,verify-theory}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, theory
from .forecaster import save_checkpoint
from .scenarios import SCENARIOS
from .stream import StreamError, generate_synthetic, load_synthetic_spec, save_csv

logger = logging.getLogger("drift_forge")


def _load_doc(path: str) -> dict:
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    if p.suffix.lower() in (".yaml", ".yml"):
        import yaml

        return yaml.safe_load(text)
    return json.loads(text)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="drift-forge", description="Drift-aware online forecasting experiments.", formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment", formatter_class=fmt)
    src = run.add_argument_group("data (exactly one)")
    src.add_argument("--data", help="CSV file, one column per channel")
    src.add_argument("--synthetic-spec", help="JSON/YAML synthetic stream spec")
    run.add_argument("--no-header", action="store_true", help="CSV has no header row")
    run.add_argument("--lookback", type=int, default=60, help="look-back window L")
    run.add_argument("--horizon", type=int, default=24, help="forecast horizon H")
    run.add_argument("--warm-fraction", type=float, default=0.25, help="leading fraction used for warm-up")
    run.add_argument("--method", choices=[m.value for m in harness.Method], default="d3a", help="update strategy")
    run.add_argument("--protocol", choices=["standard", "delayed"], default="standard", help="feedback protocol")
    run.add_argument("--model", choices=["linear", "mlp"], default="linear", help="forecaster family")
    run.add_argument("--hidden-width", type=int, default=64, help="MLP hidden units")
    run.add_argument("--lw", type=int, default=16, help="detector trailing window and memory bank size")
    run.add_argument("--mt", type=int, default=None, help="scheduled refresh period (default 64*lw)")
    run.add_argument("--alpha-t", type=float, default=0.01, help="two-sided detector significance")
    run.add_argument("--lambda", dest="lam", type=float, default=None, help="augmentation weight (default by channel count)")
    run.add_argument("--lv", type=int, default=512, help="older-pair buffer capacity")
    run.add_argument("--lr", type=float, default=1e-3, help="online Adam learning rate")
    run.add_argument("--adapt-epochs", type=int, default=20, help="epochs per adaptation event")
    run.add_argument("--seed", type=int, default=0, help="model and adaptation seed")
    run.add_argument("--out-dir", default="out", help="directory for report.json, trace.csv, model.ckpt")

    suite = sub.add_parser("suite", help="run a grid of experiments", formatter_class=fmt)
    suite.add_argument("--config", required=True, help='JSON/YAML grid file: {"base": {...}, "grid": {key: [values]}}')
    suite.add_argument("--parallelism", type=int, default=1, help="worker processes (capped by DRIFT_FORGE_THREADS)")
    suite.add_argument("--out-dir", default="suite_out", help="directory for suite.csv, summary.csv and reports/")

    synth = sub.add_parser("synth", help="generate a synthetic stream as CSV", formatter_class=fmt)
    which = synth.add_mutually_exclusive_group()
    which.add_argument("--spec", help="JSON/YAML synthetic spec")
    which.add_argument("--scenario", choices=sorted(SCENARIOS), default="three-regime", help="built-in stream")
    synth.add_argument("--seed", type=int, default=None, help="override the spec seed")
    synth.add_argument("--out", required=True, help="output CSV path")
    synth.add_argument("--spec-out", default=None, help="also write the resolved spec as JSON")

    vt = sub.add_parser("verify-theory", help="numerically check the covariance-gap results", formatter_class=fmt)
    vt.add_argument("--dim", type=int, default=20, help="maximum dimension of random instances")
    vt.add_argument("--trials", type=int, default=1000, help="instances per check (x10 for the closed-form norm)")
    vt.add_argument("--seed", type=int, default=0, help="random seed")
    vt.add_argument("--out", default=None, help="JSON report path (stdout if omitted)")
    return parser


def _cmd_run(args) -> int:
    synthetic = load_synthetic_spec(args.synthetic_spec) if args.synthetic_spec else None
    cfg = harness.ExperimentConfig(
        data_path=args.data,
        synthetic=synthetic,
        lookback=args.lookback,
        horizon=args.horizon,
        warm_fraction=args.warm_fraction,
        protocol=args.protocol,
        method=args.method,
        model_kind=args.model,
        hidden_width=args.hidden_width,
        lr=args.lr,
        l_w=args.lw,
        alpha_t=args.alpha_t,
        m_t=args.mt,
        lam=args.lam,
        l_v=args.lv,
        adapt_epochs=args.adapt_epochs,
        seed=args.seed,
        has_header=not args.no_header,
    )
    cfg.validate()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = harness.run_experiment(cfg, partial_trace_path=out / "trace.partial.csv")
    harness.emit_report(res.report, out / "report.json")
    harness.emit_trace(res.trace, out / "trace.csv")
    save_checkpoint(res.params, res.spec, out / "model.ckpt")
    r = res.report
    print(f"rounds={r.n_rounds} mse={r.accumulated_mse:.6f} mae={r.accumulated_mae:.6f} alarms={len(r.alarms)} refreshes={len(r.scheduled_refreshes)}")
    return 0


def _cmd_suite(args) -> int:
    configs = harness.expand_grid(_load_doc(args.config))
    for c in configs:
        c.validate()
    out = Path(args.out_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    rows, summary = harness.run_suite(configs, args.parallelism)
    for r in rows:
        if r.get("report") is not None:
            name = f"{r['method']}_{r['protocol']}_H{r['horizon']}_s{r['seed']}.json"
            (out / "reports" / name).write_text(json.dumps(r["report"], indent=2), encoding="utf-8")
    harness.write_table(rows, harness.SUITE_COLUMNS, out / "suite.csv")
    harness.write_table(summary, harness.SUMMARY_COLUMNS, out / "summary.csv")
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} runs, {failed} failed")
    return 1 if failed else 0


def _cmd_synth(args) -> int:
    spec = load_synthetic_spec(args.spec) if args.spec else SCENARIOS[args.scenario]()
    if args.seed is not None:
        spec = type(spec).from_dict({**spec.to_dict(), "seed": args.seed})
    save_csv(generate_synthetic(spec), args.out)
    if args.spec_out:
        Path(args.spec_out).write_text(json.dumps(spec.to_dict(), indent=2), encoding="utf-8")
    return 0


def _cmd_verify_theory(args) -> int:
    if args.dim < 2 or args.trials < 1:
        raise harness.ConfigError("--dim must be >= 2 and --trials >= 1")
    report = theory.verify_theory(trials=args.trials, seed=args.seed, dim=args.dim)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    ok = not report["prop1"]["counterexamples"] and not report["theorem1"]["counterexamples"] and report["theorem2"]["fully_satisfied"]
    return 0 if ok else 1


COMMANDS = {"run": _cmd_run, "suite": _cmd_suite, "synth": _cmd_synth, "verify-theory": _cmd_verify_theory}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (harness.ConfigError, StreamError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
