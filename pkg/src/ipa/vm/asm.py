"""Assembler for the VM's line-oriented program text.

Example::

    .entry main
    .output multiset
    mutex qlock
    sem freeSlots 64
    global nextIndex

    func addChunk(x: i64) -> i64 {
    entry:
        %neg = cmp lt %x, 0
        br_cond %neg, fix, enqueue
    fix:
        %x = sub 0, %x
    enqueue:
        lock qlock
        ...
        ret 1
    }

Operands are registers (``%r``), shared globals (``@g``) or immediates
(integers, floats, ``true``/``false``).  A block that does not end in a
terminator falls through to the next one.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..trace import TYPES

__all__ = ["AsmError", "Instr", "Function", "Program", "load_program", "CMP_OPS", "VALUE_OPS"]

CMP_OPS = ("lt", "le", "eq", "ne", "gt", "ge")
ARITH_OPS = ("add", "sub", "mul", "div", "mod")
TERMINATORS = ("br", "br_cond", "ret")
# Instructions whose result lands in a destination operand.
VALUE_OPS = ("const", "add", "sub", "mul", "div", "mod", "cmp", "alloc", "load", "len", "call", "spawn", "join")

_IDENT = r"[A-Za-z_][A-Za-z0-9_]*"
_FUNC_RE = re.compile(rf"^func\s+({_IDENT})\s*\(([^)]*)\)\s*(?:->\s*(\S+))?\s*\{{$")
_LABEL_RE = re.compile(rf"^({_IDENT}):$")
_CALL_RE = re.compile(rf"^({_IDENT})\s*\(([^)]*)\)$")
_REG_RE = re.compile(rf"^%({_IDENT})$")
_GLOBAL_RE = re.compile(rf"^@({_IDENT})$")
_INT_RE = re.compile(r"^-?[0-9]+$")
_FLOAT_RE = re.compile(r"^-?(?:[0-9]+\.[0-9]*(?:[eE][-+]?[0-9]+)?|[0-9]+[eE][-+]?[0-9]+)$")


class AsmError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Instr:
    op: str
    args: tuple = ()            # decoded operands: ("r", name) | ("g", name) | ("i", value)
    dest: tuple | None = None   # register or global operand
    cmp: str = ""               # comparison for ``cmp``
    targets: tuple = ()         # branch labels
    name: str = ""              # callee / mutex / semaphore
    line: int = 0

    def render(self) -> str:
        def fmt(o):
            kind, v = o
            if kind == "r":
                return f"%{v}"
            if kind == "g":
                return f"@{v}"
            if isinstance(v, bool):
                return "true" if v else "false"
            return repr(v)

        head = f"{fmt(self.dest)} = " if self.dest else ""
        a = ", ".join(fmt(x) for x in self.args)
        if self.op in ("call", "spawn"):
            return f"{head}{self.op} {self.name}({a})"
        if self.op == "cmp":
            return f"{head}cmp {self.cmp} {a}"
        if self.op in ("lock", "unlock", "sem_wait", "sem_post"):
            return f"{self.op} {self.name}"
        if self.op == "br":
            return f"br {self.targets[0]}"
        if self.op == "br_cond":
            return f"br_cond {a}, {self.targets[0]}, {self.targets[1]}"
        return f"{head}{self.op} {a}".rstrip()


@dataclass
class Function:
    name: str
    params: list            # [(name, type)]
    ret_type: str | None
    blocks: dict            # label -> [Instr], insertion-ordered
    line: int = 0

    @property
    def labels(self) -> list:
        return list(self.blocks)

    @property
    def entry_block(self) -> str:
        return next(iter(self.blocks))

    def instructions(self):
        for label, insns in self.blocks.items():
            for i, ins in enumerate(insns):
                yield label, i, ins


@dataclass
class Program:
    functions: dict                     # name -> Function
    entry: str = "main"
    mutexes: tuple = ()
    semaphores: dict = field(default_factory=dict)   # name -> initial count
    globals: tuple = ()
    output_policy: str = "sequence"     # "sequence" | "multiset"
    source: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def lines_of_code(self) -> int:
        return self.metadata["lines_of_code"]

    @property
    def entry_function(self) -> Function:
        return self.functions[self.entry]


def _operand(tok: str, line: int) -> tuple:
    tok = tok.strip()
    m = _REG_RE.match(tok)
    if m:
        return ("r", m.group(1))
    m = _GLOBAL_RE.match(tok)
    if m:
        return ("g", m.group(1))
    if tok == "true":
        return ("i", True)
    if tok == "false":
        return ("i", False)
    if _INT_RE.match(tok):
        return ("i", int(tok))
    if _FLOAT_RE.match(tok):
        return ("i", float(tok))
    raise AsmError(f"bad operand {tok!r}", line)


def _split_args(text: str) -> list[str]:
    text = text.strip()
    return [t.strip() for t in text.split(",")] if text else []


_ARITY = {
    "const": 1, "add": 2, "sub": 2, "mul": 2, "div": 2, "mod": 2, "cmp": 2,
    "alloc": 1, "load": 2, "store": 3, "len": 1, "ret": (0, 1), "join": 1,
    "io_read": 2, "io_write": 2, "output": 1, "br_cond": 1,
}
_NEEDS_DEST = {"const", "add", "sub", "mul", "div", "mod", "cmp", "alloc", "load", "len", "spawn"}
_NO_DEST = {"store", "ret", "br", "br_cond", "lock", "unlock", "sem_wait", "sem_post",
            "io_read", "io_write", "output"}


def _parse_instr(text: str, line: int) -> Instr:
    dest = None
    if "=" in text.split("(")[0]:
        lhs, _, text = text.partition("=")
        dest = _operand(lhs, line)
        if dest[0] == "i":
            raise AsmError("destination must be a register or global", line)
        text = text.strip()
    op, _, rest = text.partition(" ")
    rest = rest.strip()
    if op in _NEEDS_DEST and dest is None:
        raise AsmError(f"{op} needs a destination", line)
    if op in _NO_DEST and dest is not None:
        raise AsmError(f"{op} takes no destination", line)

    if op in ("call", "spawn"):
        m = _CALL_RE.match(rest)
        if not m:
            raise AsmError(f"bad {op} syntax", line)
        args = tuple(_operand(a, line) for a in _split_args(m.group(2)))
        return Instr(op, args, dest, name=m.group(1), line=line)
    if op == "cmp":
        cop, _, rest = rest.partition(" ")
        if cop not in CMP_OPS:
            raise AsmError(f"unknown comparison {cop!r}", line)
        args = tuple(_operand(a, line) for a in _split_args(rest))
        if len(args) != 2:
            raise AsmError("arity error: cmp takes 2 operands", line)
        return Instr(op, args, dest, cmp=cop, line=line)
    if op in ("lock", "unlock", "sem_wait", "sem_post"):
        if not re.match(rf"^{_IDENT}$", rest):
            raise AsmError(f"{op} needs a name", line)
        return Instr(op, (), None, name=rest, line=line)
    if op == "br":
        if not re.match(rf"^{_IDENT}$", rest):
            raise AsmError("br needs a label", line)
        return Instr(op, (), None, targets=(rest,), line=line)
    if op == "br_cond":
        parts = _split_args(rest)
        if len(parts) != 3:
            raise AsmError("arity error: br_cond takes a condition and two labels", line)
        return Instr(op, (_operand(parts[0], line),), None, targets=(parts[1], parts[2]), line=line)
    if op not in _ARITY:
        raise AsmError(f"unknown opcode {op!r}", line)
    args = tuple(_operand(a, line) for a in _split_args(rest))
    arity = _ARITY[op]
    ok = len(args) in arity if isinstance(arity, tuple) else len(args) == arity
    if not ok:
        raise AsmError(f"arity error: {op} takes {arity} operand(s), got {len(args)}", line)
    return Instr(op, args, dest, line=line)


def _parse_params(text: str, line: int) -> list:
    params = []
    for p in _split_args(text):
        name, _, typ = p.partition(":")
        name, typ = name.strip(), typ.strip()
        if not re.match(rf"^{_IDENT}$", name) or typ not in TYPES:
            raise AsmError(f"bad parameter {p!r}", line)
        if name == "return" or any(n == name for n, _ in params):
            raise AsmError(f"bad or duplicate parameter name {name!r}", line)
        params.append((name, typ))
    return params


def _explicit_fallthrough(fn: Function) -> Function:
    labels = fn.labels
    blocks = {}
    for k, label in enumerate(labels):
        insns = list(fn.blocks[label])
        if not insns or insns[-1].op not in TERMINATORS:
            if k + 1 >= len(labels):
                line = insns[-1].line if insns else fn.line
                raise AsmError(f"function {fn.name!r}: last block {label!r} must end in a terminator", line)
            insns.append(Instr("br", targets=(labels[k + 1],), line=insns[-1].line if insns else fn.line))
        blocks[label] = insns
    return Function(fn.name, fn.params, fn.ret_type, blocks, fn.line)


def _single_exit(fn: Function) -> Function:
    """Funnel every ``ret`` into one exit block."""
    blocks = {label: list(insns) for label, insns in fn.blocks.items()}
    rets = [(label, ins) for label in blocks for ins in blocks[label] if ins.op == "ret"]
    if not rets:
        raise AsmError(f"function {fn.name!r} never returns", fn.line)
    if len(rets) > 1:
        exit_label = "__exit"
        while exit_label in blocks:
            exit_label = "_" + exit_label
        retreg = ("r", "__retval")
        for label in blocks:
            new = []
            for ins in blocks[label]:
                if ins.op == "ret":
                    if ins.args:
                        new.append(Instr("const", ins.args, retreg, line=ins.line))
                    new.append(Instr("br", targets=(exit_label,), line=ins.line))
                else:
                    new.append(ins)
            blocks[label] = new
        last = rets[-1][1]
        blocks[exit_label] = [Instr("ret", (retreg,) if fn.ret_type else (), line=last.line)]
    return Function(fn.name, fn.params, fn.ret_type, blocks, fn.line)


def _metrics(functions: dict, n_globals: int, n_sync: int, loc: int) -> dict:
    insns = [ins for fn in functions.values() for _, _, ins in fn.instructions()]
    return {
        "lines_of_code": loc,
        "functions": len(functions),
        "statements": loc,
        "declarations": n_globals + n_sync + sum(len(fn.params) for fn in functions.values()),
        "array_declarations": sum(1 for i in insns if i.op == "alloc")
        + sum(1 for fn in functions.values() for _, t in fn.params if t.endswith("[]")),
        "branches": sum(1 for i in insns if i.op == "br_cond"),
        "calls": sum(1 for i in insns if i.op in ("call", "spawn")),
        "basic_blocks": sum(len(fn.blocks) for fn in functions.values()),
    }


def load_program(source: str, normalize: bool = True) -> Program:
    """Assemble ``source``; with ``normalize`` every function gets a single exit block."""
    functions: dict = {}
    mutexes: list = []
    sems: dict = {}
    globs: list = []
    entry = "main"
    policy = "sequence"
    loc = 0

    cur: Function | None = None
    cur_label: str | None = None
    for lineno, raw in enumerate(source.splitlines(), 1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if cur is None:
            parts = text.split()
            if parts[0] == ".entry" and len(parts) == 2:
                entry = parts[1]
            elif parts[0] == ".output" and len(parts) == 2 and parts[1] in ("sequence", "multiset"):
                policy = parts[1]
            elif parts[0] == "mutex" and len(parts) == 2:
                mutexes.append(parts[1])
            elif parts[0] == "sem" and len(parts) == 3 and _INT_RE.match(parts[2]):
                sems[parts[1]] = int(parts[2])
            elif parts[0] == "global" and len(parts) == 2:
                globs.append(parts[1])
            elif parts[0] == "func":
                m = _FUNC_RE.match(text)
                if not m:
                    raise AsmError("bad function header", lineno)
                name = m.group(1)
                if name in functions:
                    raise AsmError(f"duplicate function {name!r}", lineno)
                ret_type = m.group(3)
                if ret_type is not None and ret_type not in TYPES:
                    raise AsmError(f"bad return type {ret_type!r}", lineno)
                cur = Function(name, _parse_params(m.group(2), lineno), ret_type, {}, lineno)
                cur_label = None
            else:
                raise AsmError(f"unexpected text {text!r}", lineno)
            continue
        if text == "}":
            if not cur.blocks or not any(cur.blocks.values()):
                raise AsmError(f"empty function body in {cur.name!r}", lineno)
            functions[cur.name] = cur
            cur = None
            continue
        m = _LABEL_RE.match(text)
        if m:
            cur_label = m.group(1)
            if cur_label in cur.blocks:
                raise AsmError(f"duplicate label {cur_label!r}", lineno)
            cur.blocks[cur_label] = []
            continue
        if cur_label is None:
            cur_label = "entry"
            cur.blocks[cur_label] = []
        cur.blocks[cur_label].append(_parse_instr(text, lineno))
        loc += 1
    if cur is not None:
        raise AsmError(f"unterminated function {cur.name!r}")

    if entry not in functions:
        raise AsmError(f"undefined entry function {entry!r}")
    for fn in functions.values():
        for label in [l for l, b in fn.blocks.items() if not b]:
            raise AsmError(f"empty block {label!r} in {fn.name!r}", fn.line)
        for _, _, ins in fn.instructions():
            for t in ins.targets:
                if t not in fn.blocks:
                    raise AsmError(f"undefined label {t!r}", ins.line)
            if ins.op in ("call", "spawn"):
                callee = functions.get(ins.name)
                if callee is None:
                    raise AsmError(f"undefined function {ins.name!r}", ins.line)
                if len(ins.args) != len(callee.params):
                    raise AsmError(f"arity error: {ins.name} takes {len(callee.params)} argument(s)", ins.line)
                if ins.op == "call" and ins.dest is not None and callee.ret_type is None:
                    raise AsmError(f"{ins.name} returns no value", ins.line)
            if ins.op in ("lock", "unlock") and ins.name not in mutexes:
                raise AsmError(f"undeclared mutex {ins.name!r}", ins.line)
            if ins.op in ("sem_wait", "sem_post") and ins.name not in sems:
                raise AsmError(f"undeclared semaphore {ins.name!r}", ins.line)
            if ins.op == "ret" and bool(ins.args) != bool(fn.ret_type):
                raise AsmError(f"ret does not match return type of {fn.name!r}", ins.line)
            for o in ins.args + ((ins.dest,) if ins.dest else ()):
                if o[0] == "g" and o[1] not in globs:
                    raise AsmError(f"undeclared global {o[1]!r}", ins.line)
    functions = {name: _explicit_fallthrough(fn) for name, fn in functions.items()}
    if normalize:
        functions = {name: _single_exit(fn) for name, fn in functions.items()}

    return Program(
        functions=functions,
        entry=entry,
        mutexes=tuple(mutexes),
        semaphores=sems,
        globals=tuple(globs),
        output_policy=policy,
        source=source,
        metadata=_metrics(functions, len(globs), len(mutexes) + len(sems), loc),
    )
