"""Trace records and the line-oriented ``IPATRACE 1`` file format.

A trace file has a declarations section (one ``DECL`` line per program
point with its typed variable signature) followed by sample records::

    IPATRACE 1
    DECL addChunk:::ENTER x:i64
    DECL addChunk:::EXIT x:i64 return:i64

    SAMPLES
    S addChunk:::ENTER nonce=0 tid=1
    x = 4
    END

Values are typed by the declaration, so the codec never guesses between
integers and floats.  Floats are written with ``repr`` (shortest decimal
that round-trips), which also covers ``nan``/``inf`` in faulty traces.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Union

__all__ = [
    "ENTER", "EXIT", "BB", "TYPES",
    "ProgramPoint", "TraceSample", "TraceFile", "TraceFormatError",
    "parse_trace", "write_trace", "group_samples", "sample_line_numbers",
    "format_value", "read_trace",
]

ENTER = "ENTER"
EXIT = "EXIT"
BB = "BB"

TYPES = ("i64", "f64", "bool", "i64[]", "f64[]")

Value = Union[int, float, bool, tuple]

HEADER = "IPATRACE 1"
I64_MIN, I64_MAX = -(1 << 63), (1 << 63) - 1

_IDENT = r"[A-Za-z_][A-Za-z0-9_]*"
_IDENT_RE = re.compile(rf"^{_IDENT}$")
_PPT_RE = re.compile(rf"^({_IDENT}):::(ENTER|EXIT|BB:({_IDENT}))$")
_INT_RE = re.compile(r"^-?[0-9]+$")
_FLOAT_RE = re.compile(
    r"^-?(?:[0-9]+\.[0-9]*(?:[eE][-+]?[0-9]+)?|[0-9]+[eE][-+]?[0-9]+|inf|nan)$"
)
_SAMPLE_RE = re.compile(r"^S (\S+) nonce=([0-9]+) tid=([0-9]+)$")
_BINDING_RE = re.compile(rf"^({_IDENT}) = (\S+)$")


class TraceFormatError(ValueError):
    """Malformed or inconsistent trace text."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True, order=True)
class ProgramPoint:
    function: str
    kind: str
    block: str = ""

    def __post_init__(self):
        if self.kind not in (ENTER, EXIT, BB):
            raise ValueError(f"unknown program point kind {self.kind!r}")
        if (self.kind == BB) != bool(self.block):
            raise ValueError("block label is required iff kind is BB")

    @property
    def name(self) -> str:
        if self.kind == BB:
            return f"{self.function}:::BB:{self.block}"
        return f"{self.function}:::{self.kind}"

    @classmethod
    def parse(cls, text: str) -> "ProgramPoint":
        m = _PPT_RE.match(text)
        if not m:
            raise ValueError(f"bad program point name {text!r}")
        if m.group(3):
            return cls(m.group(1), BB, m.group(3))
        return cls(m.group(1), m.group(2))

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class TraceSample:
    point: ProgramPoint
    nonce: int
    thread_id: int
    bindings: tuple  # ((name, value), ...)
    seq: int = 0

    def values(self) -> dict:
        return dict(self.bindings)


@dataclass
class TraceFile:
    declarations: list = field(default_factory=list)  # [(ProgramPoint, ((name, type), ...))]
    samples: list = field(default_factory=list)

    def signature(self, point: ProgramPoint) -> tuple | None:
        for p, sig in self.declarations:
            if p == point:
                return sig
        return None

    def signatures(self) -> dict:
        return {p: sig for p, sig in self.declarations}

    def __len__(self) -> int:
        return len(self.samples)


# -- values -----------------------------------------------------------------

def _format_scalar(v, typ: str) -> str:
    if typ == "bool":
        return "true" if v else "false"
    if typ in ("f64", "f64[]"):
        return repr(float(v))
    return str(int(v))


def format_value(v, typ: str) -> str:
    if typ.endswith("[]"):
        return "[" + ",".join(_format_scalar(x, typ) for x in v) + "]"
    return _format_scalar(v, typ)


def _parse_scalar(tok: str, typ: str, line: int):
    if typ == "bool":
        if tok == "true":
            return True
        if tok == "false":
            return False
        raise TraceFormatError(f"expected bool, got {tok!r}", line)
    if typ in ("i64", "i64[]"):
        if not _INT_RE.match(tok):
            raise TraceFormatError(f"expected i64, got {tok!r}", line)
        v = int(tok)
        if not I64_MIN <= v <= I64_MAX:
            raise TraceFormatError(f"i64 out of range: {tok}", line)
        return v
    if not _FLOAT_RE.match(tok):
        raise TraceFormatError(f"expected f64, got {tok!r}", line)
    return float(tok)


def _parse_value(tok: str, typ: str, line: int):
    if typ.endswith("[]"):
        if not (tok.startswith("[") and tok.endswith("]")):
            raise TraceFormatError(f"expected array, got {tok!r}", line)
        body = tok[1:-1]
        if not body:
            return ()
        return tuple(_parse_scalar(t, typ, line) for t in body.split(","))
    return _parse_scalar(tok, typ, line)


# -- codec ------------------------------------------------------------------

def write_trace(t: TraceFile) -> bytes:
    """Serialize ``t`` canonically (deterministic, injective)."""
    out = [HEADER]
    for point, sig in t.declarations:
        parts = ["DECL", point.name] + [f"{n}:{ty}" for n, ty in sig]
        out.append(" ".join(parts))
    out.append("")
    out.append("SAMPLES")
    sigs = t.signatures()
    for s in t.samples:
        out.append(f"S {s.point.name} nonce={s.nonce} tid={s.thread_id}")
        types = dict(sigs[s.point])
        for name, v in s.bindings:
            out.append(f"{name} = {format_value(v, types[name])}")
        out.append("END")
    return ("\n".join(out) + "\n").encode("utf-8")


def parse_trace(data: bytes | str) -> TraceFile:
    """Parse trace text; raise :class:`TraceFormatError` with a line number."""
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    if not text.endswith("\n"):
        raise TraceFormatError("file must end with a newline")
    lines = text[:-1].split("\n")
    if not lines or lines[0] != HEADER:
        raise TraceFormatError(f"expected {HEADER!r} header", 1)

    decls: list = []
    sigs: dict = {}
    i = 1
    while i < len(lines) and lines[i] != "":
        lineno = i + 1
        parts = lines[i].split(" ")
        if parts[0] != "DECL" or len(parts) < 2:
            raise TraceFormatError(f"expected DECL line, got {lines[i]!r}", lineno)
        try:
            point = ProgramPoint.parse(parts[1])
        except ValueError as e:
            raise TraceFormatError(str(e), lineno) from None
        if point in sigs:
            raise TraceFormatError(f"duplicate declaration of {point.name}", lineno)
        sig = []
        for vs in parts[2:]:
            name, _, typ = vs.partition(":")
            if not _IDENT_RE.match(name) or typ not in TYPES:
                raise TraceFormatError(f"bad variable signature {vs!r}", lineno)
            if any(n == name for n, _ in sig):
                raise TraceFormatError(f"duplicate variable {name!r}", lineno)
            sig.append((name, typ))
        sigs[point] = tuple(sig)
        decls.append((point, tuple(sig)))
        i += 1
    if i >= len(lines):
        raise TraceFormatError("missing blank line before SAMPLES", i + 1)
    i += 1
    if i >= len(lines) or lines[i] != "SAMPLES":
        raise TraceFormatError("expected SAMPLES", i + 1)
    i += 1

    samples = []
    open_calls: set = set()
    closed_calls: set = set()
    while i < len(lines):
        lineno = i + 1
        m = _SAMPLE_RE.match(lines[i])
        if not m:
            raise TraceFormatError(f"expected sample header, got {lines[i]!r}", lineno)
        try:
            point = ProgramPoint.parse(m.group(1))
        except ValueError as e:
            raise TraceFormatError(str(e), lineno) from None
        if point not in sigs:
            raise TraceFormatError(f"undeclared program point {point.name}", lineno)
        nonce, tid = int(m.group(2)), int(m.group(3))
        key = (point.function, tid, nonce)
        if point.kind == ENTER:
            if key in open_calls or key in closed_calls:
                raise TraceFormatError(f"duplicate nonce {nonce} for {point.function} tid={tid}", lineno)
            open_calls.add(key)
        elif point.kind == EXIT:
            if key not in open_calls:
                raise TraceFormatError(f"EXIT without ENTER for {point.function} nonce={nonce} tid={tid}", lineno)
            open_calls.discard(key)
            closed_calls.add(key)
        sig = sigs[point]
        bindings = []
        i += 1
        for name, typ in sig:
            if i >= len(lines):
                raise TraceFormatError("unterminated sample", i + 1)
            bm = _BINDING_RE.match(lines[i])
            if not bm:
                raise TraceFormatError(f"signature mismatch: expected binding for {name!r}, got {lines[i]!r}", i + 1)
            if bm.group(1) != name:
                raise TraceFormatError(f"signature mismatch: expected {name!r}, got {bm.group(1)!r}", i + 1)
            bindings.append((name, _parse_value(bm.group(2), typ, i + 1)))
            i += 1
        if i >= len(lines) or lines[i] != "END":
            raise TraceFormatError("signature mismatch: expected END", i + 1)
        i += 1
        samples.append(TraceSample(point, nonce, tid, tuple(bindings), len(samples)))
    return TraceFile(decls, samples)


def read_trace(path) -> TraceFile:
    with open(path, "rb") as f:
        return parse_trace(f.read())


def sample_line_numbers(t: TraceFile) -> list[int]:
    """1-based line of each sample's ``S`` header in ``write_trace(t)``."""
    sigs = t.signatures()
    line = len(t.declarations) + 4
    out = []
    for s in t.samples:
        out.append(line)
        line += len(sigs[s.point]) + 2
    return out


def group_samples(t: TraceFile) -> dict:
    """Index samples by program point, preserving file order in each group."""
    groups: dict = {}
    for s in t.samples:
        groups.setdefault(s.point, []).append(s)
    return groups


def same_value(a, b) -> bool:
    """Value equality where NaN equals NaN (bit-level trace comparison)."""
    if isinstance(a, tuple) and isinstance(b, tuple):
        return len(a) == len(b) and all(same_value(x, y) for x, y in zip(a, b))
    if isinstance(a, float) and isinstance(b, float):
        return a == b or (math.isnan(a) and math.isnan(b))
    return type(a) is type(b) and a == b


def renumber(samples: Iterable[TraceSample]) -> list[TraceSample]:
    return [TraceSample(s.point, s.nonce, s.thread_id, s.bindings, i) for i, s in enumerate(samples)]
