"""Interpreter with logical threads and a seeded interleaving scheduler.

At every instruction boundary one runnable thread is chosen uniformly by a
SplitMix64 stream, so a (program, input, seed, plan) tuple pins down the
whole linearization.  Memory is sequentially consistent per instruction.

Tracing: every executed ``call``/``spawn`` emits an ENTER sample with the
callee's parameters and its ``ret`` emits the matching EXIT sample
(parameters plus ``return``).  The entry function is the process harness
and is not instrumented.  At basic-block granularity every dynamic block
entry of an instrumented function also emits a ``BB`` sample.
"""
from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass, field

from ..rng import SplitMix64
from ..trace import BB, ENTER, EXIT, ProgramPoint, TraceFile, TraceSample
from .asm import Program

__all__ = [
    "FUNCTION", "BASIC_BLOCK", "GRANULARITIES", "RunResult", "Trap",
    "execute", "default_step_budget", "golden_runs", "declarations",
    "GoldenRunError", "check_granularity",
]

FUNCTION = "function"
BASIC_BLOCK = "block"
GRANULARITIES = (FUNCTION, BASIC_BLOCK)

NORMAL, TRAP, TIMEOUT = "Normal", "Trap", "Timeout"

MAX_ALLOC = 1 << 16
MAX_HEAP = 1 << 20
MAX_DEPTH = 256
MAX_THREADS = 64
HARD_STEP_CAP = 5_000_000


def check_granularity(g: str) -> str:
    aliases = {"function": FUNCTION, "func": FUNCTION, "block": BASIC_BLOCK, "bb": BASIC_BLOCK,
               "basicblock": BASIC_BLOCK, "basic_block": BASIC_BLOCK}
    try:
        return aliases[g.lower()]
    except (KeyError, AttributeError):
        raise ValueError(f"unknown granularity {g!r}; expected 'function' or 'block'") from None


class Trap(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class GoldenRunError(RuntimeError):
    """A fault-free run did not terminate normally (a benchmark bug)."""


@dataclass
class RunResult:
    trace: TraceFile
    output: list
    outcome: str                 # Normal | Trap | Timeout
    steps: int
    activated: bool = False
    trap_reason: str = ""
    counts: dict = field(default_factory=dict)   # (function, block, index) -> executions

    @property
    def outcome_label(self) -> str:
        return f"Trap({self.trap_reason})" if self.outcome == TRAP else self.outcome


def _wrap(v: int) -> int:
    return ((v + (1 << 63)) & ((1 << 64) - 1)) - (1 << 63)


def flip_bit(v, bit: int):
    """Flip one bit of a VM value (floats through their IEEE-754 encoding)."""
    if isinstance(v, bool):
        return not v
    if isinstance(v, float):
        (u,) = struct.unpack("<Q", struct.pack("<d", v))
        (f,) = struct.unpack("<d", struct.pack("<Q", u ^ (1 << bit)))
        return f
    return _wrap(int(v) ^ (1 << bit))


def _arith(op: str, a, b):
    if isinstance(a, float) or isinstance(b, float):
        a, b = float(a), float(b)
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        if op == "mul":
            return a * b
        if b == 0.0:
            if op == "mod" or a == 0.0 or math.isnan(a):
                return math.nan
            return math.copysign(math.inf, a) * math.copysign(1.0, b)
        return a / b if op == "div" else math.fmod(a, b)
    a, b = int(a), int(b)
    if op == "add":
        return _wrap(a + b)
    if op == "sub":
        return _wrap(a - b)
    if op == "mul":
        return _wrap(a * b)
    if b == 0:
        raise Trap("div_by_zero")
    q = abs(a) // abs(b)
    if (a < 0) != (b < 0):
        q = -q
    return _wrap(q) if op == "div" else _wrap(a - b * q)


def _compare(op: str, a, b) -> bool:
    if op == "lt":
        return a < b
    if op == "le":
        return a <= b
    if op == "eq":
        return a == b
    if op == "ne":
        return a != b
    if op == "gt":
        return a > b
    return a >= b


def declarations(p: Program, granularity: str = FUNCTION) -> list:
    """Program-point declarations for every instrumented function, in program order."""
    granularity = check_granularity(granularity)
    decls = []
    for fn in p.functions.values():
        if fn.name == p.entry:
            continue
        params = tuple(fn.params)
        decls.append((ProgramPoint(fn.name, ENTER), params))
        exit_sig = params + ((("return", fn.ret_type),) if fn.ret_type else ())
        decls.append((ProgramPoint(fn.name, EXIT), exit_sig))
        if granularity == BASIC_BLOCK:
            for label in fn.blocks:
                decls.append((ProgramPoint(fn.name, BB, label), params))
    return decls


class _Frame:
    __slots__ = ("fn", "block", "insns", "pc", "regs", "nonce", "dest", "flip")

    def __init__(self, fn, regs, nonce, dest):
        self.flip = None
        self.fn = fn
        self.block = fn.entry_block
        self.insns = fn.blocks[self.block]
        self.pc = 0
        self.regs = regs
        self.nonce = nonce
        self.dest = dest


class _Thread:
    __slots__ = ("tid", "frames", "done", "retval", "nonces")

    def __init__(self, tid):
        self.tid = tid
        self.frames = []
        self.done = False
        self.retval = 0
        self.nonces = 0


class _Machine:
    def __init__(self, p: Program, seed: int, granularity: str, plan, budget: int, profile: bool):
        self.p = p
        self.rng = SplitMix64(seed)
        self.granularity = granularity
        self.budget = budget
        self.profile = profile
        self.counts: dict = {}
        self.heap: list = []
        self.allocs: dict = {}
        self.next_handle = 1
        self.globals = {g: 0 for g in p.globals}
        self.owner = {m: None for m in p.mutexes}
        self.sems = dict(p.semaphores)
        self.channel: deque = deque()
        self.output: list = []
        self.samples: list = []
        self.threads: list = []
        self.steps = 0
        self.activated = False

        self.plan = plan
        self.site = None
        self.site_hits = 0
        self.fake_lock = False
        if plan is not None:
            s = plan.site
            self.site = (s.function, s.block, s.index)
            self.fake_lock = plan.fault_type == "RaceCondition"

    # -- memory ---------------------------------------------------------
    def alloc(self, size) -> int:
        if not isinstance(size, int) or size < 0:
            raise Trap("invalid_size")
        if size > MAX_ALLOC or len(self.heap) + size > MAX_HEAP:
            raise Trap("out_of_memory")
        h = self.next_handle
        self.next_handle += 1
        self.allocs[h] = (len(self.heap), size)
        self.heap.extend([0] * size)
        return h

    def region(self, h) -> tuple:
        if isinstance(h, bool) or not isinstance(h, int) or h not in self.allocs:
            raise Trap("invalid_address")
        return self.allocs[h]

    def contents(self, h, typ: str) -> tuple:
        try:
            base, size = self.region(h)
        except Trap:
            return ()
        cells = self.heap[base:base + size]
        if typ == "f64[]":
            return tuple(float(c) for c in cells)
        return tuple(_wrap(int(c)) if math.isfinite(c) else 0 for c in cells)

    # -- tracing ----------------------------------------------------------
    def _coerce(self, v, typ: str):
        if typ.endswith("[]"):
            return self.contents(v, typ)
        if typ == "f64":
            return float(v)
        if typ == "bool":
            return bool(v)
        if isinstance(v, float):
            return _wrap(int(v)) if math.isfinite(v) else 0
        return _wrap(int(v))

    def emit(self, kind: str, frame: _Frame, tid: int, block: str = "", retval=None):
        fn = frame.fn
        if fn.name == self.p.entry:
            return
        regs = frame.regs
        bindings = [(n, self._coerce(regs[n], t)) for n, t in fn.params]
        if kind == EXIT and fn.ret_type:
            bindings.append(("return", self._coerce(retval, fn.ret_type)))
        point = ProgramPoint(fn.name, kind, block)
        self.samples.append(TraceSample(point, frame.nonce, tid, tuple(bindings), len(self.samples)))

    # -- threads --------------------------------------------------------
    def new_frame(self, thread: _Thread, fn, args, dest) -> _Frame:
        if len(thread.frames) >= MAX_DEPTH:
            raise Trap("stack_overflow")
        regs = {name: a for (name, _), a in zip(fn.params, args)}
        frame = _Frame(fn, regs, thread.nonces, dest)
        thread.nonces += 1
        thread.frames.append(frame)
        self.emit(ENTER, frame, thread.tid)
        if self.granularity == BASIC_BLOCK:
            self.emit(BB, frame, thread.tid, frame.block)
        return frame

    def runnable(self, t: _Thread) -> bool:
        f = t.frames[-1]
        ins = f.insns[f.pc]
        op = ins.op
        if op == "lock":
            owner = self.owner[ins.name]
            if owner is None:
                return True
            return self.fake_lock and (f.fn.name, f.block, f.pc) == self.site
        if op == "sem_wait":
            return self.sems[ins.name] > 0
        if op == "join":
            target = self.read(f, ins.args[0])
            if isinstance(target, int) and 0 <= target < len(self.threads):
                return self.threads[target].done
            return True
        return True

    # -- operands -------------------------------------------------------
    def read(self, f: _Frame, o):
        kind, v = o
        if kind == "r":
            try:
                return f.regs[v]
            except KeyError:
                raise Trap("uninitialized_register") from None
        if kind == "g":
            return self.globals[v]
        return v

    def write(self, f: _Frame, o, value):
        if o[0] == "r":
            f.regs[o[1]] = value
        else:
            self.globals[o[1]] = value

    # -- main loop ------------------------------------------------------
    def run(self, args) -> RunResult:
        main = _Thread(0)
        self.threads.append(main)
        entry = self.p.entry_function
        call_args = []
        for (_, typ), v in zip(entry.params, args):
            if typ.endswith("[]"):
                h = self.alloc(len(v))
                base, _ = self.allocs[h]
                self.heap[base:base + len(v)] = [float(x) if typ == "f64[]" else int(x) for x in v]
                call_args.append(h)
            elif typ == "f64":
                call_args.append(float(v))
            elif typ == "bool":
                call_args.append(bool(v))
            else:
                call_args.append(int(v))
        outcome, reason = NORMAL, ""
        try:
            self.new_frame(main, entry, call_args, None)
            while True:
                live = [t for t in self.threads if not t.done]
                ready = [t for t in live if self.runnable(t)]
                if not ready:
                    raise Trap("deadlock")
                t = ready[self.rng.below(len(ready))] if len(ready) > 1 else ready[0]
                self.step(t)
                self.steps += 1
                if main.done:
                    break
                if self.steps >= self.budget:
                    outcome = TIMEOUT
                    break
        except Trap as e:
            outcome, reason = TRAP, e.reason
        if outcome == NORMAL and self.steps >= self.budget:
            outcome = TIMEOUT
        trace = TraceFile(declarations(self.p, self.granularity), self.samples)
        return RunResult(trace, self.output, outcome, self.steps, self.activated, reason, self.counts)

    def _fire(self, f: _Frame) -> bool:
        """True when the fault plan's site is being executed at its chosen occurrence."""
        if self.site is None or (f.fn.name, f.block, f.pc) != self.site:
            return False
        if self.fake_lock:
            self.activated = True
            return True
        self.site_hits += 1
        if self.site_hits == self.plan.site.occurrence:
            self.activated = True
            return True
        return False

    def step(self, t: _Thread):
        f = t.frames[-1]
        ins = f.insns[f.pc]
        op = ins.op
        if self.profile:
            key = (f.fn.name, f.block, f.pc)
            self.counts[key] = self.counts.get(key, 0) + 1
        fire = self.site is not None and self._fire(f)
        ftype = self.plan.fault_type if fire else None
        params = self.plan.parameters if fire else None
        f.pc += 1

        if op == "const":
            v = self.read(f, ins.args[0])
        elif op in ("add", "sub", "mul", "div", "mod"):
            v = _arith(op, self.read(f, ins.args[0]), self.read(f, ins.args[1]))
        elif op == "cmp":
            v = _compare(ins.cmp, self.read(f, ins.args[0]), self.read(f, ins.args[1]))
        elif op == "br":
            self._goto(t, f, ins.targets[0])
            return
        elif op == "br_cond":
            self._goto(t, f, ins.targets[0] if self.read(f, ins.args[0]) else ins.targets[1])
            return
        elif op == "alloc":
            size = self.read(f, ins.args[0])
            if ftype == "BufferOverflowMalloc":
                size = max(0, int(size) - params["delta"])
            v = self.alloc(size)
            if ftype == "InvalidPointer":
                v = flip_bit(v, params["bit"])
        elif op == "load":
            base, size = self.region(self.read(f, ins.args[0]))
            i = self.read(f, ins.args[1])
            if not isinstance(i, int) or not 0 <= i < size:
                raise Trap("out_of_bounds")
            v = self.heap[base + i]
        elif op == "store":
            base, size = self.region(self.read(f, ins.args[0]))
            i = self.read(f, ins.args[1])
            if not isinstance(i, int) or not 0 <= i < size:
                raise Trap("out_of_bounds")
            self.heap[base + i] = self.read(f, ins.args[2])
            return
        elif op == "len":
            v = self.region(self.read(f, ins.args[0]))[1]
        elif op in ("call", "spawn"):
            args = [self.read(f, a) for a in ins.args]
            if ftype == "FunctionCallCorruption":
                k = params["arg"]
                args[k] = flip_bit(args[k], params["bit"])
            callee = self.p.functions[ins.name]
            if op == "call":
                frame = self.new_frame(t, callee, args, ins.dest)
                if ftype == "DataCorruption":
                    frame.flip = params["bit"]
                return
            if len(self.threads) >= MAX_THREADS:
                raise Trap("too_many_threads")
            child = _Thread(len(self.threads))
            self.threads.append(child)
            self.new_frame(child, callee, args, None)
            v = child.tid
        elif op == "join":
            target = self.read(f, ins.args[0])
            if not isinstance(target, int) or not 0 <= target < len(self.threads) or target == t.tid:
                raise Trap("invalid_thread")
            v = self.threads[target].retval
            if ins.dest is None:
                return
        elif op == "ret":
            rv = self.read(f, ins.args[0]) if ins.args else None
            self.emit(EXIT, f, t.tid, retval=rv)
            t.frames.pop()
            if t.frames:
                if f.dest is not None:
                    self.write(t.frames[-1], f.dest, rv if f.flip is None else flip_bit(rv, f.flip))
            else:
                t.done = True
                t.retval = rv if rv is not None else 0
            return
        elif op == "lock":
            if ftype != "RaceCondition":
                self.owner[ins.name] = t.tid
            return
        elif op == "unlock":
            if self.owner[ins.name] == t.tid:
                self.owner[ins.name] = None
            return
        elif op == "sem_wait":
            self.sems[ins.name] -= 1
            return
        elif op == "sem_post":
            self.sems[ins.name] += 1
            return
        elif op in ("io_read", "io_write"):
            base, _ = self.region(self.read(f, ins.args[0]))
            n = self.read(f, ins.args[1])
            if ftype == "FileIoBufferOverflow":
                n = int(n) + params["delta"]
            if not isinstance(n, int) or n < 0:
                raise Trap("invalid_size")
            # Overflow runs into neighbouring allocations; only the heap end traps.
            if base + n > len(self.heap):
                raise Trap("out_of_bounds")
            if op == "io_write":
                self.channel.extend(self.heap[base:base + n])
            else:
                for k in range(n):
                    self.heap[base + k] = self.channel.popleft() if self.channel else 0
            return
        elif op == "output":
            self.output.append(self.read(f, ins.args[0]))
            return
        else:  # pragma: no cover - the assembler rejects unknown opcodes
            raise Trap(f"bad_opcode_{op}")

        if ftype == "DataCorruption":
            v = flip_bit(v, params["bit"])
        self.write(f, ins.dest, v)

    def _goto(self, t: _Thread, f: _Frame, label: str):
        f.block = label
        f.insns = f.fn.blocks[label]
        f.pc = 0
        if self.granularity == BASIC_BLOCK:
            self.emit(BB, f, t.tid, label)


def _scalar(name: str, typ: str, v):
    if isinstance(v, (list, tuple, dict, str)) or v is None:
        raise ValueError(f"argument {name} expects {typ}, got {v!r}")
    if typ.startswith("f64"):
        return float(v)
    if typ.startswith("bool"):
        return bool(v)
    if isinstance(v, float) and not v.is_integer():
        raise ValueError(f"argument {name} expects {typ}, got {v!r}")
    return int(v)


def _coerce_arg(name: str, typ: str, v):
    if typ.endswith("[]"):
        if not isinstance(v, (list, tuple)):
            raise ValueError(f"argument {name} expects {typ}, got {v!r}")
        return [_scalar(f"{name}[{i}]", typ[:-2], x) for i, x in enumerate(v)]
    return _scalar(name, typ, v)


def execute(p: Program, input=(), seed: int = 0, granularity: str = FUNCTION, plan=None,
            step_budget: int | None = None, profile: bool = False) -> RunResult:
    """Run ``p`` on ``input`` (one value per entry-function parameter)."""
    granularity = check_granularity(granularity)
    entry = p.entry_function
    if len(input) != len(entry.params):
        raise ValueError(f"{entry.name} takes {len(entry.params)} argument(s), got {len(input)}")
    input = [_coerce_arg(name, typ, v) for (name, typ), v in zip(entry.params, input)]
    if step_budget is None:
        step_budget = default_step_budget(p, input, granularity)
    if step_budget <= 0:
        raise ValueError("step_budget must be positive")
    return _Machine(p, seed, granularity, plan, step_budget, profile).run(input)


def default_step_budget(p: Program, input=(), granularity: str = FUNCTION, multiplier: int = 10) -> int:
    """``multiplier`` times the step count of the fault-free seed-0 run."""
    ref = _Machine(p, 0, check_granularity(granularity), None, HARD_STEP_CAP, False).run(input)
    if ref.outcome != NORMAL:
        raise GoldenRunError(f"fault-free seed-0 run ended with {ref.outcome_label}")
    return multiplier * ref.steps


def golden_runs(p: Program, input, n: int, seeds=None, granularity: str = FUNCTION,
                step_budget: int | None = None) -> list[TraceFile]:
    """``n`` fault-free traces; any non-Normal run aborts with :class:`GoldenRunError`."""
    seeds = list(range(n)) if seeds is None else list(seeds)
    if len(seeds) != n or len(set(seeds)) != n:
        raise ValueError("need n distinct seeds")
    if step_budget is None:
        step_budget = default_step_budget(p, input, granularity)
    traces = []
    for s in seeds:
        r = execute(p, input, s, granularity, None, step_budget)
        if r.outcome != NORMAL:
            raise GoldenRunError(f"fault-free run with seed {s} ended with {r.outcome_label}")
        traces.append(r.trace)
    return traces
