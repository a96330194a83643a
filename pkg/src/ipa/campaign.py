"""End-to-end fault-injection campaigns.

A campaign profiles the program with fault-free runs, infers invariants,
refuses to continue if the invariant set has not stabilised, then injects
``N`` activated faults per fault type and scores each faulty run by
outcome and by the invariants it violates.

Overheads are accounted in deterministic work units so that a campaign's
JSON report is a pure function of its configuration:

* ``I1`` instructions executed plus samples traced by the profiling runs
* ``I2`` variable bindings scanned by inference
* ``I3`` invariant evaluations per faulty run (mean)
* ``E1`` instructions plus samples of the single golden run used by diffing
* ``E3`` sample comparisons per faulty run when diffing against it (mean)
"""
from __future__ import annotations

import csv
import io
import json
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .epa import detect, diff_traces
from .inference import CLASSES, InvariantSet, invariant_density, stability_curve
from .injector import FaultType, enumerate_sites, make_plan, plan_dict
from .rng import derive_seed
from .stats import spearman, wilson_interval
from .trace import TraceFile
from .vm.asm import Program, load_program
from .vm.builtins import BUILTINS, DEFAULT_THREADS, INPUT_GENERATORS, builtin, default_input
from .vm.machine import (
    FUNCTION, NORMAL, RunResult, GoldenRunError, check_granularity, default_step_budget, execute,
)

__all__ = [
    "CampaignConfig", "CampaignResult", "FaultTypeResult", "RunRecord", "ConfigError",
    "run_campaign", "classify_outcome", "fault_coverage", "class_coverage", "invariant_coverage",
    "overhead_ratios", "outputs_equal", "correlate", "BENIGN", "CRASH_HANG", "SDC", "OUTCOMES",
    "CONFIG_VERSION", "load_config",
]

BENIGN, CRASH_HANG, SDC = "Benign", "CrashHang", "SDC"
OUTCOMES = (BENIGN, CRASH_HANG, SDC)
CONFIG_VERSION = 1
DRAW_CAP_FACTOR = 20


class ConfigError(ValueError):
    pass


# -- configuration ------------------------------------------------------------

@dataclass
class CampaignConfig:
    program: str = "workqueue"
    source: str | None = None
    input: object = None
    threads: int = DEFAULT_THREADS
    granularity: str = FUNCTION
    profiling_runs: int = 5
    injections: int = 200
    threshold: float = 0.99
    golden_seed: int = 0
    plan_seed: int = 0
    step_multiplier: int = 10
    fault_types: list = field(default_factory=lambda: [ft.value for ft in FaultType])
    version: int = CONFIG_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version!r}")
        if int(self.injections) < 1:
            raise ConfigError("injections per fault type must be >= 1")
        if int(self.profiling_runs) < 1:
            raise ConfigError("profiling_runs must be >= 1")
        if not 0.0 <= float(self.threshold) <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        if int(self.threads) < 1:
            raise ConfigError("threads must be >= 1")
        if int(self.step_multiplier) < 1:
            raise ConfigError("step_multiplier must be >= 1")
        try:
            self.granularity = check_granularity(self.granularity)
            self.fault_types = [FaultType(f).value for f in self.fault_types]
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.source is None and self.program not in BUILTINS:
            raise ConfigError(f"unknown built-in {self.program!r} and no source given")
        if isinstance(self.input, dict):
            gen = self.input.get("generator")
            if gen not in INPUT_GENERATORS:
                raise ConfigError(f"unknown input generator {gen!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "version" not in d:
            raise ConfigError("config needs a top-level 'version' field")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def load(self) -> Program:
        return load_program(self.source) if self.source is not None else builtin(self.program)

    def run_input(self, p: Program, run: int = 0) -> list:
        """Entry-function arguments for profiling run ``run``."""
        inp = self.input
        if isinstance(inp, dict):
            args = {k: v for k, v in inp.items() if k != "generator"}
            data = INPUT_GENERATORS[inp["generator"]](run, **args)
            return [data, self.threads] if self.source is None else [data]
        if self.source is None:
            return default_input(self.program, self.threads, inp)
        return list(inp or [])


def load_config(path) -> CampaignConfig:
    """Read a JSON campaign config; relative ``source`` paths resolve next to it."""
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    src = d.get("source")
    if isinstance(src, str) and src.startswith("@"):
        d["source"] = (path.parent / src[1:]).read_text()
    return CampaignConfig.from_dict(d)


# -- scoring ------------------------------------------------------------------

def _canon(v):
    return repr(v)


def outputs_equal(a: list, b: list, policy: str = "sequence") -> bool:
    if policy == "multiset":
        return Counter(map(_canon, a)) == Counter(map(_canon, b))
    return list(map(_canon, a)) == list(map(_canon, b))


def classify_outcome(r: RunResult, golden_output: list, policy: str = "sequence") -> str:
    if r.outcome != NORMAL:
        return CRASH_HANG
    return BENIGN if outputs_equal(r.output, golden_output, policy) else SDC


@dataclass(frozen=True)
class RunRecord:
    draw: int
    plan: dict
    activated: bool
    outcome: str            # Normal / Trap(reason) / Timeout
    outcome3: str | None    # Benign / CrashHang / SDC, activated runs only
    violated: tuple         # sorted invariant keys
    steps: int
    checks: int             # invariant evaluations performed by detection
    compares: int           # sample comparisons performed by diffing

    def to_dict(self) -> dict:
        d = asdict(self)
        d["violated"] = list(self.violated)
        return d


def fault_coverage(records) -> tuple[float, float, float]:
    """Share of runs violating at least one invariant, with its Wilson 95% CI."""
    records = list(records)
    if not records:
        raise ValueError("no activated runs")
    hits = sum(1 for r in records if r.violated)
    lo, hi = wilson_interval(hits, len(records))
    return hits / len(records), lo, hi


def class_coverage(records, cls: str, class_keys) -> float | None:
    """Share of runs violating some invariant of ``cls``; None when the class is empty."""
    keys = set(class_keys)
    if not keys:
        return None
    records = list(records)
    if not records:
        return None
    return sum(1 for r in records if keys.intersection(r.violated)) / len(records)


def invariant_coverage(records, keys) -> dict:
    records = list(records)
    counts = Counter(k for r in records for k in r.violated)
    n = len(records)
    return {k: (counts[k] / n if n else 0.0) for k in keys}


def overhead_ratios(timings: dict, profiling_runs: int = 5) -> tuple[float, float]:
    """``S = E1 / (I1 + I2)`` and ``D = (E1 + E3) / (I1 / profiling_runs + I3)``."""
    missing = {"I1", "I2", "I3", "E1", "E3"} - set(timings)
    if missing:
        raise ValueError(f"missing timings: {', '.join(sorted(missing))}")
    i1, i2, i3, e1, e3 = (float(timings[k]) for k in ("I1", "I2", "I3", "E1", "E3"))
    if min(i1, i2, i3, e1, e3) < 0:
        raise ValueError("timings must be non-negative")
    setup, det = i1 + i2, i1 / profiling_runs + i3
    if setup == 0 or det == 0:
        raise ValueError("zero denominator")
    return e1 / setup, (e1 + e3) / det


# -- results ------------------------------------------------------------------

@dataclass
class FaultTypeResult:
    fault_type: str
    sites: int
    skipped: str | None = None
    draws: int = 0
    activated: int = 0
    tallies: dict = field(default_factory=lambda: {o: 0 for o in OUTCOMES})
    coverage: float | None = None
    ci_low: float | None = None
    ci_high: float | None = None
    class_coverage: dict = field(default_factory=dict)
    outcome_class_coverage: dict = field(default_factory=dict)
    invariant_coverage: dict = field(default_factory=dict)
    runs: list = field(default_factory=list)

    def to_dict(self, with_runs: bool = False) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "runs"}
        if with_runs:
            d["runs"] = [r.to_dict() for r in self.runs]
        return d


@dataclass
class CampaignResult:
    config: dict
    status: str                     # ok | non-converged
    stability: list                 # [(n, count, fingerprint)]
    invariants: InvariantSet | None
    lines_of_code: int
    density: float | None
    class_counts: dict
    faults: list
    costs: dict
    metrics: dict
    seconds: dict | None = None

    @property
    def converged(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "status": self.status,
            "stability": [list(r) for r in self.stability],
            "invariant_count": len(self.invariants) if self.invariants is not None else None,
            "lines_of_code": self.lines_of_code,
            "density": self.density,
            "class_counts": self.class_counts,
            "faults": [f.to_dict() for f in self.faults],
            "costs": self.costs,
            "metrics": self.metrics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table6_csv(self) -> str:
        c = self.costs
        cols = ["program", "lines_of_code", "invariants", "I1", "I2", "I3", "E1", "E3", "S", "D"]
        row = [self.config["program"], self.lines_of_code,
               len(self.invariants) if self.invariants is not None else "",
               *(c.get(k, "") for k in cols[3:])]
        return _csv([cols, row])

    def table5_csv(self) -> str:
        rows = [["fault_type", "outcome", "class", "coverage"]]
        for f in self.faults:
            for o in OUTCOMES:
                for cls in CLASSES:
                    v = f.outcome_class_coverage.get(o, {}).get(cls)
                    rows.append([f.fault_type, o, cls, "" if v is None else v])
        return _csv(rows)

    def coverage_csv(self) -> str:
        rows = [["fault_type", "sites", "skipped", "draws", "activated", *OUTCOMES,
                 "coverage", "ci_low", "ci_high"]]
        for f in self.faults:
            rows.append([f.fault_type, f.sites, f.skipped or "", f.draws, f.activated,
                         *(f.tallies[o] for o in OUTCOMES),
                         *("" if v is None else v for v in (f.coverage, f.ci_low, f.ci_high))])
        return _csv(rows)

    def runs_jsonl(self) -> str:
        lines = []
        for f in self.faults:
            for r in f.runs:
                d = r.to_dict()
                d["fault_type"] = f.fault_type
                lines.append(json.dumps(d, sort_keys=True))
        return "".join(line + "\n" for line in lines)

    def write(self, outdir) -> list[Path]:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "campaign.json": self.to_json(),
            "table6.csv": self.table6_csv(),
            "table5.csv": self.table5_csv(),
            "coverage.csv": self.coverage_csv(),
            "runs.jsonl": self.runs_jsonl(),
        }
        if self.invariants is not None:
            files["invariants.txt"] = self.invariants.to_text()
        if self.seconds is not None:
            files["timings.json"] = json.dumps(self.seconds, indent=2, sort_keys=True) + "\n"
        written = []
        for name, text in files.items():
            (out / name).write_text(text)
            written.append(out / name)
        return written


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


# -- execution ----------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(ctx: dict):
    _WORKER.clear()
    _WORKER.update(ctx)


def _one_run(ft: str, ft_index: int, draw: int, ctx: dict | None = None) -> RunRecord:
    ctx = ctx or _WORKER
    p: Program = ctx["program"]
    plan = make_plan(ft, ctx["sites"][ft], derive_seed(ctx["plan_seed"], ft_index, draw),
                     ctx["occurrences"], p)
    sched = derive_seed(ctx["plan_seed"], ft_index, draw, 1)
    r = execute(p, ctx["input"], sched, ctx["granularity"], plan, ctx["budget"])
    pd = plan_dict(plan)
    if not r.activated:
        return RunRecord(draw, pd, False, r.outcome_label, None, (), r.steps, 0, 0)
    det = detect(ctx["invariants"], r.trace)
    checks = sum(len(ctx["index"].get(s.point, ())) for s in r.trace.samples)
    compares = max(len(ctx["golden"].samples), len(r.trace.samples))
    outcome3 = classify_outcome(r, ctx["golden_output"], ctx["policy"])
    return RunRecord(draw, pd, True, r.outcome_label, outcome3, tuple(sorted(det.violated_keys())),
                     r.steps, checks, compares)


def _draw_records(ft: str, ft_index: int, n: int, cap: int, ctx: dict, pool, jobs: int) -> tuple[list, int]:
    """First ``n`` activated runs in draw order (or all within ``cap`` draws)."""
    activated, draws = [], 0
    chunk = max(n, 8 * jobs)
    while len(activated) < n and draws < cap:
        batch = range(draws, min(cap, draws + chunk))
        if pool is None:
            recs = [_one_run(ft, ft_index, j, ctx) for j in batch]
        else:
            recs = list(pool.map(_one_run, [ft] * len(batch), [ft_index] * len(batch), batch))
        for r in recs:
            draws = r.draw + 1
            if r.activated:
                activated.append(r)
                if len(activated) == n:
                    break
    return activated, draws


def _golden(cfg: CampaignConfig, p: Program, run: int, budget: int) -> RunResult:
    inp = cfg.run_input(p, run)
    if run and isinstance(cfg.input, dict):
        budget = default_step_budget(p, inp, cfg.granularity, cfg.step_multiplier)
    r = execute(p, inp, cfg.golden_seed + run, cfg.granularity, None, budget)
    if r.outcome != NORMAL:
        raise GoldenRunError(f"fault-free run {run} ended with {r.outcome_label}")
    return r


def run_campaign(cfg: CampaignConfig, jobs: int = 1, timings: bool = False) -> CampaignResult:
    """Profile, infer, gate on stability, inject and score."""
    cfg.validate()
    p = cfg.load()
    P = cfg.profiling_runs
    inp0 = cfg.run_input(p, 0)
    budget = default_step_budget(p, inp0, cfg.granularity, cfg.step_multiplier)
    secs: dict = {}

    t0 = time.perf_counter()
    runs = [_golden(cfg, p, i, budget) for i in range(3 * P)]
    secs["I1"] = (time.perf_counter() - t0) / 3
    traces = [r.trace for r in runs]
    golden_output = runs[0].output
    policy = p.output_policy
    for r in runs[1:]:
        if isinstance(cfg.input, dict):
            break
        if not outputs_equal(r.output, golden_output, policy):
            raise GoldenRunError("fault-free runs disagree on the functional output")

    t0 = time.perf_counter()
    curve = stability_curve(traces, (P, 2 * P, 3 * P), cfg.threshold, cfg.granularity)
    secs["I2"] = (time.perf_counter() - t0) / 3
    invs = curve.sets[P]
    stable = curve.converged and curve.rows[0][2] == curve.rows[-1][2]
    loc = p.lines_of_code
    metrics = dict(p.metadata)

    costs = {
        "I1": sum(r.steps + len(r.trace.samples) for r in runs[:P]),
        "I2": sum(len(s.bindings) for t in traces[:P] for s in t.samples),
        "E1": runs[0].steps + len(runs[0].trace.samples),
    }
    base = dict(config=cfg.to_dict(), stability=curve.rows, lines_of_code=loc, metrics=metrics)
    if not stable:
        return CampaignResult(status="non-converged", invariants=invs, density=invariant_density(invs, loc),
                              class_counts=invs.class_counts(), faults=[], costs=costs, **base)

    sites = {ft: enumerate_sites(p, ft) for ft in cfg.fault_types}
    prof = execute(p, inp0, cfg.golden_seed, cfg.granularity, None, budget, profile=True)
    ctx = {
        "program": p, "input": inp0, "granularity": cfg.granularity, "budget": budget,
        "plan_seed": cfg.plan_seed, "sites": sites, "occurrences": dict(prof.counts),
        "invariants": invs, "index": invs.by_point(), "golden": runs[0].trace,
        "golden_output": golden_output, "policy": policy,
    }
    by_class = {c: [i.key for i in invs if i.cls == c] for c in CLASSES}
    all_keys = invs.keys()

    pool = ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(ctx,)) if jobs > 1 else None
    faults = []
    try:
        for ft_index, ft in enumerate(FaultType):
            if ft.value not in cfg.fault_types:
                continue
            res = FaultTypeResult(ft.value, len(sites[ft.value]))
            if not sites[ft.value]:
                res.skipped = "no injection sites"
                faults.append(res)
                continue
            cap = DRAW_CAP_FACTOR * cfg.injections
            recs, draws = _draw_records(ft.value, ft_index, cfg.injections, cap, ctx, pool, jobs)
            res.draws, res.activated, res.runs = draws, len(recs), recs
            if not recs:
                res.skipped = f"no activated fault in {draws} draws"
                faults.append(res)
                continue
            for r in recs:
                res.tallies[r.outcome3] += 1
            res.coverage, res.ci_low, res.ci_high = fault_coverage(recs)
            res.class_coverage = {c: class_coverage(recs, c, by_class[c]) for c in CLASSES}
            res.outcome_class_coverage = {
                o: {c: class_coverage([r for r in recs if r.outcome3 == o], c, by_class[c]) for c in CLASSES}
                for o in OUTCOMES
            }
            res.invariant_coverage = invariant_coverage(recs, all_keys)
            faults.append(res)
    finally:
        if pool is not None:
            pool.shutdown()

    scored = [r for f in faults for r in f.runs]
    if scored:
        costs["I3"] = sum(r.checks for r in scored) / len(scored)
        costs["E3"] = sum(r.compares for r in scored) / len(scored)
        costs["S"], costs["D"] = overhead_ratios(costs, P)
    else:
        costs["S"] = costs["E1"] / (costs["I1"] + costs["I2"])

    seconds = None
    if timings:
        seconds = _measure_seconds(p, inp0, cfg, invs, runs[0].trace, traces[:P], secs, scored, ctx)
    return CampaignResult(status="ok", invariants=invs, density=invariant_density(invs, loc),
                          class_counts=invs.class_counts(), faults=faults, costs=costs,
                          seconds=seconds, **base)


def _measure_seconds(p, inp, cfg, invs, golden: TraceFile, train, secs: dict, scored, ctx) -> dict:
    """Wall-clock counterparts of the work-unit ledger (non-deterministic)."""
    t0 = time.perf_counter()
    execute(p, inp, cfg.golden_seed, cfg.granularity, None, ctx["budget"])
    e1 = time.perf_counter() - t0
    sample = scored[: min(len(scored), 20)]
    i3 = e3 = 0.0
    for rec in sample:
        ft = rec.plan["fault_type"]
        k = list(FaultType).index(FaultType(ft))
        plan = make_plan(ft, ctx["sites"][ft], derive_seed(cfg.plan_seed, k, rec.draw), ctx["occurrences"], p)
        sched = derive_seed(cfg.plan_seed, k, rec.draw, 1)
        t = execute(p, inp, sched, cfg.granularity, plan, ctx["budget"]).trace
        t0 = time.perf_counter()
        detect(invs, t)
        i3 += time.perf_counter() - t0
        t0 = time.perf_counter()
        diff_traces(golden, t)
        e3 += time.perf_counter() - t0
    n = max(1, len(sample))
    out = {"I1": secs["I1"], "I2": secs["I2"], "I3": i3 / n, "E1": e1, "E3": e3 / n}
    if sample:
        out["S"], out["D"] = overhead_ratios(out, cfg.profiling_runs)
    return out


def correlate(results, metric_names=None) -> dict:
    """Spearman correlation of each program metric with fault coverage across campaigns.

    Coverage per campaign is pooled over every scored run of every fault type.
    """
    results = [r for r in results if r.converged]
    cov = []
    for r in results:
        scored = [x for f in r.faults for x in f.runs]
        cov.append(sum(1 for x in scored if x.violated) / len(scored) if scored else 0.0)
    if not results:
        return {}
    names = metric_names or sorted(set.intersection(*(set(r.metrics) for r in results)))
    out = {}
    for m in names:
        xs = [r.metrics[m] for r in results]
        try:
            out[m] = spearman(xs, cov)
        except ValueError:
            out[m] = None
    return out
