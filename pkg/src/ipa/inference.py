"""Likely-invariant inference over pooled golden traces.

Candidates are instantiated per program point from a closed catalogue,
falsified against every pooled sample and kept when their confidence
reaches the threshold.  Each invariant is classified into one of eight
structural classes:

====  =========================  =======================================
A     ArrayEquality              ``a[] == c``
B     ElementwiseInitialization  ``a[] == [c0, c1, ...]`` at ENTER
C     Elementwise                ``a[] < b[]`` (and <=, ==, >, >=)
D     Initialization             ``x == orig(x)``, ``x == orig(x) + c``
E     MultiValue                 ``x one of {v1, v2[, v3]}``
F     Order                      ``a[] sorted by <=`` / ``>=``
G     Relational                 ``x == c``, ``x >= c``, ``x != 0``, ``x < y`` ...
H     ReturnValue                any G/E form mentioning ``return``
====  =========================  =======================================
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Iterable

from .trace import BB, ENTER, EXIT, ProgramPoint, TraceFile, TraceSample
from .vm.machine import BASIC_BLOCK, FUNCTION, check_granularity

__all__ = [
    "CLASSES", "Predicate", "Invariant", "InvariantSet", "InferenceError",
    "infer", "confidence", "check", "explain", "classify", "stability_curve",
    "StabilityCurve", "invariant_density", "pair_entries", "DEFAULT_THRESHOLD",
]

DEFAULT_THRESHOLD = 0.99

CLASSES = {
    "A": "ArrayEquality",
    "B": "ElementwiseInitialization",
    "C": "Elementwise",
    "D": "Initialization",
    "E": "MultiValue",
    "F": "Order",
    "G": "Relational",
    "H": "ReturnValue",
}

MAX_ONE_OF = 3

_OPS = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    "==": lambda a, b: a == b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}
_EQUALITY_KINDS = ("eq", "oneof", "arr_const", "arr_init")


class InferenceError(ValueError):
    pass


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_CONST = r"(true|false|-?[0-9]+|-?[0-9.]+(?:e[-+]?[0-9]+)?|-?inf|nan)(?![A-Za-z0-9_])"


def _parse_const(tok: str):
    if tok == "true":
        return True
    if tok == "false":
        return False
    if re.fullmatch(r"-?[0-9]+", tok):
        return int(tok)
    return float(tok)


@dataclass(frozen=True)
class Predicate:
    """Structured catalogue predicate.

    ``kind`` is one of eq, ge, le, ne0, oneof, rel, arr_const, arr_init,
    sorted, elementwise, orig.
    """

    kind: str
    vars: tuple
    op: str = ""
    const: object = None

    def text(self) -> str:
        k, v = self.kind, self.vars
        if k == "eq":
            return f"{v[0]} == {_fmt(self.const)}"
        if k == "ge":
            return f"{v[0]} >= {_fmt(self.const)}"
        if k == "le":
            return f"{v[0]} <= {_fmt(self.const)}"
        if k == "ne0":
            return f"{v[0]} != 0"
        if k == "oneof":
            return f"{v[0]} one of {{{', '.join(_fmt(c) for c in self.const)}}}"
        if k == "rel":
            return f"{v[0]} {self.op} {v[1]}"
        if k == "arr_const":
            return f"{v[0]}[] == {_fmt(self.const)}"
        if k == "arr_init":
            return f"{v[0]}[] == [{', '.join(_fmt(c) for c in self.const)}]"
        if k == "sorted":
            return f"{v[0]}[] sorted by {self.op}"
        if k == "elementwise":
            return f"{v[0]}[] {self.op} {v[1]}[]"
        if k == "orig":
            if self.const is None:
                return f"{v[0]} == orig({v[0]})"
            return f"{v[0]} == orig({v[0]}) + {_fmt(self.const)}"
        raise ValueError(f"unknown predicate kind {k!r}")

    __str__ = text

    @classmethod
    def parse(cls, text: str) -> "Predicate":
        for pattern, build in _PARSERS:
            m = re.fullmatch(pattern, text)
            if m:
                return build(m)
        raise ValueError(f"not a catalogue predicate: {text!r}")


_ID = r"([A-Za-z_][A-Za-z0-9_]*)"
_PARSERS = [
    (rf"{_ID} == orig\(\1\)", lambda m: Predicate("orig", (m.group(1),))),
    (rf"{_ID} == orig\(\1\) \+ {_CONST}", lambda m: Predicate("orig", (m.group(1),), const=_parse_const(m.group(2)))),
    (rf"{_ID}\[\] == orig\(\1\[\]\)", lambda m: Predicate("orig", (m.group(1) + "[]",))),
    (rf"{_ID}\[\] sorted by (<=|>=)", lambda m: Predicate("sorted", (m.group(1),), op=m.group(2))),
    (rf"{_ID}\[\] (<=|>=|==|<|>) {_ID}\[\]", lambda m: Predicate("elementwise", (m.group(1), m.group(3)), op=m.group(2))),
    (rf"{_ID}\[\] == \[(.*)\]", lambda m: Predicate(
        "arr_init", (m.group(1),), const=tuple(_parse_const(t) for t in m.group(2).split(", ")) if m.group(2) else ())),
    (rf"{_ID}\[\] == {_CONST}", lambda m: Predicate("arr_const", (m.group(1),), const=_parse_const(m.group(2)))),
    (rf"{_ID} one of \{{(.*)\}}", lambda m: Predicate(
        "oneof", (m.group(1),), const=tuple(_parse_const(t) for t in m.group(2).split(", ")))),
    (rf"{_ID} != 0", lambda m: Predicate("ne0", (m.group(1),))),
    (rf"{_ID} == {_CONST}", lambda m: Predicate("eq", (m.group(1),), const=_parse_const(m.group(2)))),
    (rf"{_ID} >= {_CONST}", lambda m: Predicate("ge", (m.group(1),), const=_parse_const(m.group(2)))),
    (rf"{_ID} <= {_CONST}", lambda m: Predicate("le", (m.group(1),), const=_parse_const(m.group(2)))),
    (rf"{_ID} (<=|>=|==|<|>) {_ID}", lambda m: Predicate("rel", (m.group(1), m.group(3)), op=m.group(2))),
]


def classify(pred: Predicate) -> str:
    """Exclusive class letter; precedence H > B > A > F > C > D > E > G."""
    k = pred.kind
    if k in ("eq", "ge", "le", "ne0", "oneof", "rel") and "return" in pred.vars:
        return "H"
    if k == "arr_init":
        return "B"
    if k == "arr_const":
        return "A"
    if k == "sorted":
        return "F"
    if k == "elementwise":
        return "C"
    if k == "orig":
        return "D"
    if k == "oneof":
        return "E"
    return "G"


def confidence(pred: Predicate, n: int, falsified: bool = False) -> float:
    """Probability that an unfalsified candidate did not hold by chance.

    Comparison-shaped candidates score ``1 - (1/2)**n``; equality-to-constant
    and one-of candidates committing to ``k`` distinct values score
    ``1 - k * (1/2)**n``, clamped to [0, 1].  Falsified candidates score 0.
    """
    if n <= 0:
        raise ValueError("confidence needs at least one sample")
    if falsified:
        return 0.0
    if pred.kind in _EQUALITY_KINDS:
        if pred.kind == "oneof":
            k = len(pred.const)
        elif pred.kind == "arr_init":
            k = max(1, len(set(pred.const)))
        else:
            k = 1
        return min(1.0, max(0.0, 1.0 - k * 0.5 ** n))
    return 1.0 - 0.5 ** n


@dataclass(frozen=True)
class Invariant:
    point: ProgramPoint
    cls: str
    predicate: Predicate
    support: int
    confidence: float

    @property
    def text(self) -> str:
        return self.predicate.text()

    @property
    def key(self) -> str:
        return f"{self.point.name} {self.text}"

    def sort_key(self) -> tuple:
        p = self.point
        return (p.function, p.kind, p.block, self.cls, self.text)

    def line(self) -> str:
        return f"{self.point.name}\t{self.cls}\t{self.text}\tn={self.support}\tconf={self.confidence!r}"

    def __str__(self) -> str:
        return self.line()


@dataclass
class InvariantSet:
    invariants: list = field(default_factory=list)
    runs: int = 0
    threshold: float = DEFAULT_THRESHOLD
    granularity: str = FUNCTION

    def __post_init__(self):
        self.invariants = sorted(self.invariants, key=Invariant.sort_key)

    def __len__(self) -> int:
        return len(self.invariants)

    def __iter__(self):
        return iter(self.invariants)

    def keys(self) -> list[str]:
        return [inv.key for inv in self.invariants]

    def fingerprint(self) -> str:
        """Digest of the predicates alone (support and confidence excluded)."""
        h = hashlib.sha256()
        for inv in self.invariants:
            h.update(f"{inv.point.name}\t{inv.cls}\t{inv.text}\n".encode())
        return h.hexdigest()[:16]

    def by_point(self) -> dict:
        index: dict = {}
        for inv in self.invariants:
            index.setdefault(inv.point, []).append(inv)
        return index

    def class_counts(self) -> dict:
        counts = {c: 0 for c in CLASSES}
        for inv in self.invariants:
            counts[inv.cls] += 1
        return counts

    def to_text(self) -> str:
        head = [
            "# ipa-invariants 1",
            f"# runs={self.runs} threshold={self.threshold!r} granularity={self.granularity}",
        ]
        return "\n".join(head + [inv.line() for inv in self.invariants]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "InvariantSet":
        meta = {"runs": 0, "threshold": DEFAULT_THRESHOLD, "granularity": FUNCTION}
        invs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                for m in re.finditer(r"(\w+)=(\S+)", line):
                    meta[m.group(1)] = m.group(2)
                continue
            parts = line.split("\t")
            if len(parts) != 5 or not parts[3].startswith("n=") or not parts[4].startswith("conf="):
                raise ValueError(f"line {lineno}: malformed invariant line")
            try:
                point = ProgramPoint.parse(parts[0])
                pred = Predicate.parse(parts[2])
            except ValueError as e:
                raise ValueError(f"line {lineno}: {e}") from None
            if classify(pred) != parts[1]:
                raise ValueError(f"line {lineno}: class {parts[1]} does not match predicate")
            invs.append(Invariant(point, parts[1], pred, int(parts[3][2:]), float(parts[4][5:])))
        return cls(invs, int(meta["runs"]), float(meta["threshold"]), check_granularity(str(meta["granularity"])))

    def restrict(self, threshold: float) -> "InvariantSet":
        return InvariantSet([i for i in self.invariants if i.confidence >= threshold],
                            self.runs, threshold, self.granularity)


# -- evaluation -------------------------------------------------------------

def _holds(pred: Predicate, vals: dict, orig: dict | None) -> bool:
    k = pred.kind
    if k == "orig":
        name = pred.vars[0]
        if name.endswith("[]"):
            name = name[:-2]
            return tuple(vals[name]) == tuple(orig[name])
        if pred.const is None:
            return vals[name] == orig[name]
        return vals[name] == orig[name] + pred.const
    x = vals[pred.vars[0]]
    if k == "eq":
        return x == pred.const
    if k == "ge":
        return x >= pred.const
    if k == "le":
        return x <= pred.const
    if k == "ne0":
        return x != 0
    if k == "oneof":
        return any(x == c for c in pred.const)
    if k == "rel":
        return _OPS[pred.op](x, vals[pred.vars[1]])
    if k == "arr_const":
        return all(e == pred.const for e in x)
    if k == "arr_init":
        return tuple(x) == tuple(pred.const)
    if k == "sorted":
        f = _OPS[pred.op]
        return all(f(x[i], x[i + 1]) for i in range(len(x) - 1))
    if k == "elementwise":
        y = vals[pred.vars[1]]
        f = _OPS[pred.op]
        return len(x) == len(y) and all(f(a, b) for a, b in zip(x, y))
    raise ValueError(f"unknown predicate kind {k!r}")


def _var_names(pred: Predicate) -> list[str]:
    return [v[:-2] if v.endswith("[]") else v for v in pred.vars]


def explain(inv: Invariant, sample: TraceSample, orig: TraceSample | None = None) -> str | None:
    """``None`` when ``inv`` holds on ``sample``, otherwise the violation reason."""
    vals = sample.values()
    for name in _var_names(inv.predicate):
        if name not in vals:
            return "missing"
    o = None
    if inv.predicate.kind == "orig":
        if orig is None:
            raise ValueError("D-class invariants need the nonce-paired ENTER sample")
        o = orig.values()
        if any(name not in o for name in _var_names(inv.predicate)):
            return "missing"
    return None if _holds(inv.predicate, vals, o) else "false"


def check(inv: Invariant, sample: TraceSample, orig: TraceSample | None = None) -> bool:
    return explain(inv, sample, orig) is None


# -- inference --------------------------------------------------------------

def pair_entries(t: TraceFile) -> dict:
    """Map each EXIT sample's seq to its nonce-paired ENTER sample."""
    open_calls = {}
    pairs = {}
    for s in t.samples:
        key = (s.point.function, s.thread_id, s.nonce)
        if s.point.kind == ENTER:
            open_calls[key] = s
        elif s.point.kind == EXIT:
            entry = open_calls.pop(key, None)
            if entry is not None:
                pairs[s.seq] = entry
    return pairs


def _is_num(typ: str) -> bool:
    return typ in ("i64", "f64")


def _strongest(pairs: Iterable[tuple]) -> str | None:
    ops = {"==", "<", "<=", ">", ">="}
    any_pair = False
    for a, b in pairs:
        any_pair = True
        ops = {o for o in ops if _OPS[o](a, b)}
        if not ops:
            return None
    if not any_pair:
        return None
    for o in ("==", "<", ">", "<=", ">="):
        if o in ops:
            return o
    return None


def _scalar_candidates(name: str, typ: str, values: list) -> list:
    distinct = sorted(set(values), key=lambda v: (float(v), type(v).__name__))
    if any(isinstance(v, float) and math.isnan(v) for v in values):
        return []
    if len(distinct) == 1:
        return [Predicate("eq", (name,), const=distinct[0])]
    if typ == "bool":
        return []
    if len(distinct) <= MAX_ONE_OF:
        return [Predicate("oneof", (name,), const=tuple(distinct))]
    out = [Predicate("ge", (name,), const=distinct[0]), Predicate("le", (name,), const=distinct[-1])]
    if distinct[0] < 0 < distinct[-1] and 0 not in set(values):
        out.append(Predicate("ne0", (name,)))
    return out


def _point_candidates(point: ProgramPoint, sig: tuple, samples: list, pairs: list) -> list:
    """(predicate, support) for every candidate that no sample falsifies."""
    n = len(samples)
    rows = [s.values() for s in samples]
    cols = {name: [r[name] for r in rows] for name, _ in sig}
    types = dict(sig)
    out = []
    constant = set()

    for name, typ in sig:
        if typ.endswith("[]"):
            continue
        for pred in _scalar_candidates(name, typ, cols[name]):
            out.append((pred, n))
            if pred.kind == "eq":
                constant.add(name)

    scalars = [nm for nm, t in sig if _is_num(t)]
    for i, x in enumerate(scalars):
        for y in scalars[i + 1:]:
            if x in constant and y in constant:
                continue
            op = _strongest(zip(cols[x], cols[y]))
            if op:
                out.append((Predicate("rel", (x, y), op=op), n))

    arrays = [nm for nm, t in sig if t.endswith("[]")]
    for a in arrays:
        vals = [tuple(v) for v in cols[a]]
        nonempty = [v for v in vals if v]
        if not nonempty:
            continue
        if point.kind == ENTER and len(set(vals)) == 1:
            out.append((Predicate("arr_init", (a,), const=vals[0]), n))
            continue
        elems = {e for v in nonempty for e in v}
        if len(elems) == 1 and not any(isinstance(e, float) and math.isnan(e) for e in elems):
            out.append((Predicate("arr_const", (a,), const=next(iter(elems))), len(nonempty)))
            continue
        multi = [v for v in vals if len(v) >= 2]
        if multi:
            for op in ("<=", ">="):
                f = _OPS[op]
                strict = "<" if op == "<=" else ">"
                if all(all(f(v[i], v[i + 1]) for i in range(len(v) - 1)) for v in multi) and any(
                    _OPS[strict](v[i], v[i + 1]) for v in multi for i in range(len(v) - 1)
                ):
                    out.append((Predicate("sorted", (a,), op=op), len(multi)))
    for i, a in enumerate(arrays):
        for b in arrays[i + 1:]:
            if types[a] != types[b]:
                continue
            va, vb = cols[a], cols[b]
            if any(len(x) != len(y) for x, y in zip(va, vb)):
                continue
            support = sum(1 for x in va if x)
            if not support:
                continue
            op = _strongest((p, q) for x, y in zip(va, vb) for p, q in zip(x, y))
            if op:
                out.append((Predicate("elementwise", (a, b), op=op), support))

    if point.kind == EXIT and pairs:
        for name, typ in sig:
            if name == "return":
                continue
            exits = [ex[name] for ex, en in pairs if name in en]
            entries = [en[name] for ex, en in pairs if name in en]
            if not exits:
                continue
            if typ.endswith("[]"):
                if all(tuple(a) == tuple(b) for a, b in zip(exits, entries)):
                    out.append((Predicate("orig", (name + "[]",)), len(exits)))
                continue
            if all(a == b for a, b in zip(exits, entries)):
                out.append((Predicate("orig", (name,)), len(exits)))
            elif typ == "i64":
                diffs = {a - b for a, b in zip(exits, entries)}
                if len(diffs) == 1:
                    out.append((Predicate("orig", (name,), const=diffs.pop()), len(exits)))
    return out


def _granularity_points(granularity: str, point: ProgramPoint) -> bool:
    return (point.kind == BB) == (granularity == BASIC_BLOCK)


def infer(traces, threshold: float = DEFAULT_THRESHOLD, granularity: str = FUNCTION) -> InvariantSet:
    """Infer the invariant set of ``traces`` (samples pooled across all runs)."""
    traces = list(traces)
    if not traces:
        raise InferenceError("need at least one trace")
    if not 0.0 <= threshold <= 1.0:
        raise InferenceError("threshold must be a probability")
    granularity = check_granularity(granularity)
    decls = traces[0].declarations
    for t in traces[1:]:
        if t.declarations != decls:
            raise InferenceError("traces do not share declarations")
    points = [(p, sig) for p, sig in decls if _granularity_points(granularity, p)]
    if granularity == BASIC_BLOCK and not points:
        raise InferenceError("traces carry no basic-block program points")

    by_point: dict = {p: [] for p, _ in points}
    exit_pairs: dict = {p: [] for p, _ in points}
    for t in traces:
        pairs = pair_entries(t)
        for s in t.samples:
            bucket = by_point.get(s.point)
            if bucket is None:
                continue
            bucket.append(s)
            if s.seq in pairs:
                exit_pairs[s.point].append((s.values(), pairs[s.seq].values()))

    invs = []
    for point, sig in points:
        samples = by_point[point]
        if not samples:
            continue
        for pred, support in _point_candidates(point, sig, samples, exit_pairs[point]):
            conf = confidence(pred, support)
            if conf >= threshold:
                invs.append(Invariant(point, classify(pred), pred, support, conf))
    return InvariantSet(invs, len(traces), threshold, granularity)


# -- stability ----------------------------------------------------------------

DEFAULT_NS = (1, 2, 3, 4, 5, 10, 15)


@dataclass
class StabilityCurve:
    rows: list           # [(n, invariant_count, fingerprint)]
    converged: bool | None
    sets: dict = field(default_factory=dict, repr=False)

    @property
    def converged_at(self) -> int | None:
        """Smallest sampled n from which every later fingerprint matches the last."""
        if not self.converged:
            return None
        final = self.rows[-1][2]
        at = self.rows[-1][0]
        for n, _, fp in reversed(self.rows):
            if fp != final:
                break
            at = n
        return at


def stability_curve(run_generator, ns=DEFAULT_NS, threshold: float = DEFAULT_THRESHOLD,
                    granularity: str = FUNCTION) -> StabilityCurve:
    """Infer from the first ``n`` golden traces for each ``n`` in ``ns``.

    ``run_generator`` is either ``f(i) -> TraceFile`` (fresh run ``i``) or an
    iterable of traces.  Converged means the sets at the last two ``n`` match.
    """
    ns = sorted(set(int(n) for n in ns))
    if not ns or ns[0] < 1:
        raise ValueError("ns must be positive run counts")
    need = ns[-1]
    if callable(run_generator):
        traces = [run_generator(i) for i in range(need)]
    else:
        traces = []
        for t in run_generator:
            traces.append(t)
            if len(traces) == need:
                break
        if len(traces) < need:
            raise ValueError(f"run generator produced {len(traces)} traces, need {need}")
    rows, sets = [], {}
    for n in ns:
        s = infer(traces[:n], threshold, granularity)
        sets[n] = s
        rows.append((n, len(s), s.fingerprint()))
    converged = None if len(rows) < 2 else rows[-1][2] == rows[-2][2]
    return StabilityCurve(rows, converged, sets)


def invariant_density(invariants, lines_of_code) -> float:
    """Invariants per line of code, in percent."""
    loc = lines_of_code if isinstance(lines_of_code, int) else lines_of_code.lines_of_code
    if loc <= 0:
        raise ValueError("lines of code must be positive")
    return 100.0 * len(invariants) / loc
