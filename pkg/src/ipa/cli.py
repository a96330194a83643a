"""Command-line entry point: ``ipa <subcommand> ...``.

Exit codes: 0 success, 1 usage or parse error, 2 runtime trap, 3 timeout,
4 invariants did not converge.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .campaign import ConfigError, load_config, run_campaign
from .epa import detect, diff_traces, localize, mean_pairwise_variance, variance, violations_to_jsonl
from .inference import DEFAULT_NS, InvariantSet, infer, stability_curve
from .injector import FaultPlan, FaultType, enumerate_sites, make_plan
from .trace import TraceFormatError, read_trace, write_trace
from .vm.asm import AsmError, load_program
from .vm.builtins import BUILTINS, DEFAULT_THREADS, builtin, builtin_source, default_input
from .vm.machine import GoldenRunError, NORMAL, TIMEOUT, TRAP, execute

EXIT_OK, EXIT_USAGE, EXIT_TRAP, EXIT_TIMEOUT, EXIT_UNSTABLE = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(args, human: str, machine: dict):
    if args.json:
        print(json.dumps(machine, sort_keys=True))
    elif human:
        print(human)


def _write(path, data):
    if isinstance(data, str):
        data = data.encode()
    if path in (None, "-"):
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    else:
        Path(path).write_bytes(data)


def _program_and_input(args):
    if (args.builtin is None) == (args.program is None):
        raise UsageError("give exactly one of --builtin or --program")
    data = json.loads(args.input) if args.input is not None else None
    if args.builtin is not None:
        return builtin(args.builtin), default_input(args.builtin, args.threads, data)
    p = load_program(Path(args.program).read_text())
    return p, list(data or [])


# -- subcommands --------------------------------------------------------------

def cmd_run(args) -> int:
    p, inp = _program_and_input(args)
    plan = FaultPlan.from_json(Path(args.fault).read_text()) if args.fault else None
    r = execute(p, inp, args.seed, args.granularity, plan, args.budget)
    _write(args.output, write_trace(r.trace))
    info = {"outcome": r.outcome_label, "steps": r.steps, "output": r.output, "samples": len(r.trace.samples)}
    if plan is not None:
        info["activated"] = r.activated
    human = f"{r.outcome_label} steps={r.steps} samples={len(r.trace.samples)}"
    if plan is not None:
        human += f" activated={'yes' if r.activated else 'no'}"
    if args.output not in (None, "-"):
        _emit(args, human, info)
    return {NORMAL: EXIT_OK, TRAP: EXIT_TRAP, TIMEOUT: EXIT_TIMEOUT}[r.outcome]


def cmd_plan(args) -> int:
    p, _ = _program_and_input(args)
    sites = enumerate_sites(p, args.fault_type)
    if not sites:
        raise UsageError(f"{args.fault_type} has no injection sites in this program")
    plan = make_plan(args.fault_type, sites, args.seed, None, p)
    _write(args.output, plan.to_json() + "\n")
    return EXIT_OK


def cmd_infer(args) -> int:
    traces = [read_trace(t) for t in args.traces]
    s = infer(traces, args.threshold, args.granularity)
    _write(args.output, s.to_text())
    if args.output not in (None, "-"):
        _emit(args, f"{len(s)} invariants from {len(traces)} trace(s)",
              {"invariants": len(s), "traces": len(traces), "classes": s.class_counts(),
               "fingerprint": s.fingerprint()})
    return EXIT_OK


def cmd_detect(args) -> int:
    s = InvariantSet.from_text(Path(args.invariants).read_text())
    t = read_trace(args.trace)
    det = detect(s, t)
    _write(args.output, violations_to_jsonl(det))
    if args.output not in (None, "-"):
        summary = det.summary()
        summary["windows"] = localize(det, t)
        _emit(args, f"{len(det)} violation(s) of {summary['distinct_invariants']} invariant(s) "
                    f"in {det.samples} samples", summary)
    return EXIT_OK


def cmd_diff(args) -> int:
    devs = diff_traces(read_trace(args.golden), read_trace(args.faulty))
    text = "".join(json.dumps(d.to_dict(), sort_keys=True) + "\n" for d in devs)
    _write(args.output, text)
    if args.output not in (None, "-"):
        _emit(args, f"{len(devs)} deviation(s)", {"deviations": len(devs)})
    return EXIT_OK


def cmd_variance(args) -> int:
    traces = [read_trace(t) for t in args.traces]
    if len(traces) < 2:
        raise UsageError("variance needs at least two traces")
    v = variance(traces[0], traces[1]) if len(traces) == 2 else mean_pairwise_variance(traces)
    _emit(args, f"{v!r}", {"variance": v, "traces": len(traces)})
    return EXIT_OK


def cmd_campaign(args) -> int:
    cfg = load_config(args.config)
    res = run_campaign(cfg, jobs=args.jobs, timings=args.timings)
    res.write(args.output)
    if res.converged:
        lines = [f"{f.fault_type}: " + (f"skipped ({f.skipped})" if f.skipped else
                 f"activated={f.activated} coverage={f.coverage:.3f} [{f.ci_low:.3f}, {f.ci_high:.3f}]")
                 for f in res.faults]
        lines.append(f"S={res.costs['S']:.3f}" + (f" D={res.costs['D']:.3f}" if "D" in res.costs else ""))
    else:
        lines = ["invariants did not converge; campaign not run"]
    _emit(args, "\n".join(lines), {"status": res.status, "output": str(args.output)})
    return EXIT_OK if res.converged else EXIT_UNSTABLE


def cmd_stability(args) -> int:
    cfg = load_config(args.config)
    if args.granularity:
        cfg.granularity = args.granularity
        cfg.validate()
    try:
        ns = [int(x) for x in args.ns.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad --ns list {args.ns!r}") from None
    if not ns or min(ns) < 1:
        raise UsageError("--ns needs positive run counts")
    p = cfg.load()

    def run(i):
        r = execute(p, cfg.run_input(p, i), cfg.golden_seed + i, cfg.granularity)
        if r.outcome != NORMAL:
            raise GoldenRunError(f"fault-free run {i} ended with {r.outcome_label}")
        return r.trace

    curve = stability_curve(run, ns, cfg.threshold, cfg.granularity)
    lines = [f"n={n}\tinvariants={c}\tfingerprint={fp}" for n, c, fp in curve.rows]
    if curve.converged is None:
        lines.append("convergence undefined for a single n")
    elif curve.converged:
        lines.append(f"converged at n={curve.converged_at}")
    else:
        lines.append(f"not converged by n={curve.rows[-1][0]}")
    _emit(args, "\n".join(lines), {"rows": [list(r) for r in curve.rows], "converged": curve.converged,
                                   "converged_at": curve.converged_at})
    return EXIT_UNSTABLE if curve.converged is False else EXIT_OK


def cmd_dump_builtin(args) -> int:
    _write(args.output, builtin_source(args.name))
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable stdout")

    prog = argparse.ArgumentParser(add_help=False)
    prog.add_argument("--builtin", choices=BUILTINS)
    prog.add_argument("--program", help="VM assembly file")
    prog.add_argument("--input", help="JSON input: data list for built-ins, argument list otherwise")
    prog.add_argument("--threads", type=int, default=DEFAULT_THREADS)

    ap = _Parser(prog="ipa", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", parents=[common, prog], help="execute a program and write its trace")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--granularity", default="function")
    p.add_argument("--fault", help="fault plan JSON file")
    p.add_argument("--budget", type=int, help="step budget (default: 10x the seed-0 run)")
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("plan", parents=[common, prog], help="draw a fault plan")
    p.add_argument("--fault-type", required=True, choices=[f.value for f in FaultType])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("infer", parents=[common], help="infer invariants from golden traces")
    p.add_argument("traces", nargs="+")
    p.add_argument("--threshold", type=float, default=0.99)
    p.add_argument("--granularity", default="function")
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("detect", parents=[common], help="check a trace against an invariant file")
    p.add_argument("invariants")
    p.add_argument("trace")
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("diff", parents=[common], help="positional golden-run diff")
    p.add_argument("golden")
    p.add_argument("faulty")
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("variance", parents=[common], help="golden-run variance (mean over pairs)")
    p.add_argument("traces", nargs="+")
    p.set_defaults(func=cmd_variance)

    p = sub.add_parser("campaign", parents=[common], help="run a fault-injection campaign")
    p.add_argument("config")
    p.add_argument("-o", "--output", required=True, help="report directory")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--timings", action="store_true", help="also write wall-clock timings.json")
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("stability", parents=[common], help="invariant count and set per number of runs")
    p.add_argument("config")
    p.add_argument("--ns", default=",".join(map(str, DEFAULT_NS)))
    p.add_argument("--granularity")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("dump-builtin", parents=[common], help="print a built-in's assembly source")
    p.add_argument("name", choices=BUILTINS)
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_dump_builtin)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # --help exits 0, parse errors exit 1
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    if getattr(args, "jobs", 1) < 1:
        print("ipa: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError, TraceFormatError, AsmError, json.JSONDecodeError,
            OSError, KeyError, ValueError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"ipa: error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except GoldenRunError as e:
        print(f"ipa: error: {e}", file=sys.stderr)
        return EXIT_TRAP


if __name__ == "__main__":
    sys.exit(main())
