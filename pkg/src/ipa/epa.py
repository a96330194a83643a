"""Error propagation analysis back-ends.

Classic EPA diffs a faulty trace against a golden one position by position.
Invariant-based EPA checks each faulty sample against the invariants
inferred for its program point and needs no golden trace at all.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

from .inference import Invariant, InvariantSet, explain, pair_entries
from .trace import ENTER, EXIT, TraceFile, TraceSample, same_value, sample_line_numbers

__all__ = [
    "Deviation", "Violation", "Detection", "diff_traces", "variance", "mean_pairwise_variance",
    "detect", "localize", "violations_to_jsonl", "DATA_VIOLATION", "CONTROL_FLOW_VIOLATION",
]

DATA_VIOLATION = "DataViolation"
CONTROL_FLOW_VIOLATION = "ControlFlowViolation"


@dataclass(frozen=True)
class Deviation:
    kind: str
    golden_seq: int | None
    faulty_seq: int | None
    detail: str

    def to_dict(self) -> dict:
        return {"kind": self.kind, "golden_seq": self.golden_seq,
                "faulty_seq": self.faulty_seq, "detail": self.detail}


def _equal(v, w) -> bool:
    if isinstance(v, tuple) or isinstance(w, tuple):
        return (isinstance(v, tuple) and isinstance(w, tuple) and len(v) == len(w)
                and all(same_value(x, y) for x, y in zip(v, w)))
    return same_value(v, w)


def _differing(a: TraceSample, b: TraceSample) -> list[str] | None:
    """Names whose values differ, or None when the binding layouts differ."""
    if [n for n, _ in a.bindings] != [n for n, _ in b.bindings]:
        return None
    return [n for (n, v), (_, w) in zip(a.bindings, b.bindings) if not _equal(v, w)]


def diff_traces(golden: TraceFile, faulty: TraceFile) -> list[Deviation]:
    """Positional sample-by-sample comparison (thread ids and nonces ignored)."""
    out = []
    g, f = golden.samples, faulty.samples
    for i, (a, b) in enumerate(zip(g, f)):
        if a.point != b.point:
            out.append(Deviation(CONTROL_FLOW_VIOLATION, i, i, f"{a.point.name} vs {b.point.name}"))
        else:
            diff = _differing(a, b)
            if diff is None:
                out.append(Deviation(CONTROL_FLOW_VIOLATION, i, i, f"{a.point.name}: binding layout"))
            elif diff:
                out.append(Deviation(DATA_VIOLATION, i, i, f"{a.point.name}: {', '.join(diff)}"))
    m = min(len(g), len(f))
    for i in range(m, len(g)):
        out.append(Deviation(CONTROL_FLOW_VIOLATION, i, None, f"missing {g[i].point.name}"))
    for i in range(m, len(f)):
        out.append(Deviation(CONTROL_FLOW_VIOLATION, None, i, f"extra {f[i].point.name}"))
    return out


def variance(t1: TraceFile, t2: TraceFile) -> float:
    """Share of conflicting sample lines relative to ``t1``'s length, capped at 1."""
    if not t1.samples:
        raise ValueError("variance needs a non-empty reference trace")
    return min(1.0, len(diff_traces(t1, t2)) / len(t1.samples))


def mean_pairwise_variance(traces) -> float:
    """Mean of ``variance(ti, tj)`` over ordered pairs i < j."""
    traces = list(traces)
    if len(traces) < 2:
        raise ValueError("need at least two traces")
    vals = [variance(traces[i], traces[j]) for i in range(len(traces)) for j in range(i + 1, len(traces))]
    return sum(vals) / len(vals)


# -- invariant-based detection ------------------------------------------------

_BOUNDARY = {ENTER: "entry", EXIT: "exit"}


@dataclass(frozen=True)
class Violation:
    faulty_line: int
    seq: int
    function: str
    boundary: str
    invariant: Invariant
    reason: str
    thread_id: int = 0
    nonce: int = 0

    def to_dict(self) -> dict:
        inv = self.invariant
        return {
            "line": self.faulty_line,
            "seq": self.seq,
            "function": self.function,
            "boundary": self.boundary,
            "point": inv.point.name,
            "class": inv.cls,
            "invariant": inv.text,
            "reason": self.reason,
            "tid": self.thread_id,
            "nonce": self.nonce,
        }


class Detection(list):
    """Violations in trace order, plus scan counters."""

    def __init__(self, violations=(), samples: int = 0, skipped: int = 0, unpaired: int = 0):
        super().__init__(violations)
        self.samples = samples
        self.skipped = skipped      # samples at points without invariants
        self.unpaired = unpaired    # EXIT samples without an ENTER, D-class not evaluated

    def violated_keys(self) -> set:
        return {v.invariant.key for v in self}

    def summary(self) -> dict:
        return {
            "summary": True,
            "samples": self.samples,
            "violations": len(self),
            "distinct_invariants": len(self.violated_keys()),
            "skipped_samples": self.skipped,
            "unpaired_exits": self.unpaired,
        }


def detect(invariants: InvariantSet, faulty: TraceFile) -> Detection:
    """Check every faulty sample against the invariants of its program point."""
    index = invariants.by_point()
    pairs = pair_entries(faulty)
    lines = sample_line_numbers(faulty)
    found, skipped, unpaired = [], 0, 0
    for s, line in zip(faulty.samples, lines):
        invs = index.get(s.point)
        if not invs:
            skipped += 1
            continue
        orig = pairs.get(s.seq)
        if s.point.kind == EXIT and orig is None:
            unpaired += 1
        boundary = _BOUNDARY.get(s.point.kind, "block")
        for inv in invs:
            if inv.predicate.kind == "orig" and orig is None:
                continue
            reason = explain(inv, s, orig)
            if reason is not None:
                found.append(Violation(line, s.seq, s.point.function, boundary, inv, reason,
                                       s.thread_id, s.nonce))
    return Detection(found, len(faulty.samples), skipped, unpaired)


def localize(violations, faulty: TraceFile) -> list[dict]:
    """Propagation windows for invocations whose EXIT failed but whose ENTER held.

    Each window marks a single dynamic call of ``function`` (by thread and
    nonce) as the place where the error entered the observed state.
    """
    by_call: dict = {}
    for v in violations:
        key = (v.function, v.thread_id, v.nonce)
        by_call.setdefault(key, set()).add(v.boundary)
    entered = {(s.point.function, s.thread_id, s.nonce) for s in faulty.samples if s.point.kind == ENTER}
    windows = []
    for (fn, tid, nonce), kinds in sorted(by_call.items()):
        if "exit" in kinds and "entry" not in kinds and (fn, tid, nonce) in entered:
            windows.append({"function": fn, "tid": tid, "nonce": nonce,
                            "window": f"between {fn}:::ENTER and {fn}:::EXIT"})
    return windows


def violations_to_jsonl(det: Detection) -> str:
    lines = [json.dumps(v.to_dict(), sort_keys=True) for v in det]
    lines.append(json.dumps(det.summary(), sort_keys=True))
    return "\n".join(lines) + "\n"
