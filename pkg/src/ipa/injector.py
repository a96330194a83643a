"""Fault sites, fault plans and source-level comparison mutations.

The six runtime fault types perturb one instruction execution per run
(``RaceCondition`` instead turns one lock into a no-op for the whole run).
The perturbation itself is applied by the interpreter when execution
reaches the plan's site at its chosen dynamic occurrence.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from enum import Enum

from .rng import SplitMix64
from .vm.asm import VALUE_OPS, Program

__all__ = [
    "FaultType", "Site", "FaultPlan", "enumerate_sites", "make_plan",
    "mutate_comparison", "NEGATED_CMP", "SIZE_DELTA_MAX",
]

SIZE_DELTA_MAX = 8


class FaultType(str, Enum):
    DataCorruption = "DataCorruption"
    FileIoBufferOverflow = "FileIoBufferOverflow"
    BufferOverflowMalloc = "BufferOverflowMalloc"
    FunctionCallCorruption = "FunctionCallCorruption"
    InvalidPointer = "InvalidPointer"
    RaceCondition = "RaceCondition"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True, order=True)
class Site:
    function: str
    block: str
    index: int
    occurrence: int = 0   # 1-based dynamic ordinal; 0 until a plan fixes it

    def static(self) -> tuple:
        return (self.function, self.block, self.index)


@dataclass(frozen=True)
class FaultPlan:
    fault_type: FaultType
    site: Site
    seed: int
    parameters: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = {
            "fault_type": str(self.fault_type),
            "function": self.site.function,
            "block": self.site.block,
            "index": self.site.index,
            "occurrence": self.site.occurrence,
            "seed": self.seed,
            "parameters": dict(sorted(self.parameters.items())),
        }
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FaultPlan":
        d = json.loads(text)
        ft = FaultType(d["fault_type"])
        params = {k: int(v) for k, v in d.get("parameters", {}).items()}
        _check_parameters(ft, params)
        site = Site(d["function"], d["block"], int(d["index"]), int(d.get("occurrence", 1)))
        return cls(ft, site, int(d.get("seed", 0)), params)


_REQUIRED = {
    FaultType.DataCorruption: {"bit"},
    FaultType.FileIoBufferOverflow: {"delta"},
    FaultType.BufferOverflowMalloc: {"delta"},
    FaultType.FunctionCallCorruption: {"arg", "bit"},
    FaultType.InvalidPointer: {"bit"},
    FaultType.RaceCondition: set(),
}


def _check_parameters(ft: FaultType, params: dict):
    if set(params) != _REQUIRED[ft]:
        raise ValueError(f"{ft} needs parameters {sorted(_REQUIRED[ft])}, got {sorted(params)}")
    if "bit" in params and not 0 <= params["bit"] <= 63:
        raise ValueError("bit index must be in 0..63")
    if "delta" in params and params["delta"] < 1:
        raise ValueError("size delta must be >= 1")
    if "arg" in params and params["arg"] < 0:
        raise ValueError("argument index must be >= 0")


def _writes_shared(ins) -> bool:
    return ins.op in ("store", "io_read") or (ins.dest is not None and ins.dest[0] == "g")


def _guards_store(fn, label: str, index: int) -> bool:
    """Does the lock at (label, index) protect at least one shared write?"""
    mutex = fn.blocks[label][index].name
    labels = fn.labels
    start = labels.index(label)
    first = True
    for lab in labels[start:]:
        insns = fn.blocks[lab][index + 1:] if first else fn.blocks[lab]
        first = False
        for ins in insns:
            if ins.op == "unlock" and ins.name == mutex:
                return False
            if _writes_shared(ins):
                return True
    return False


def enumerate_sites(p: Program, fault_type) -> list[Site]:
    """Static injection sites compatible with ``fault_type`` (program order)."""
    ft = FaultType(fault_type)
    sites = []
    for fn in p.functions.values():
        for label, i, ins in fn.instructions():
            op = ins.op
            if ft is FaultType.DataCorruption:
                ok = op in VALUE_OPS and ins.dest is not None
            elif ft is FaultType.FileIoBufferOverflow:
                ok = op in ("io_read", "io_write")
            elif ft in (FaultType.BufferOverflowMalloc, FaultType.InvalidPointer):
                ok = op == "alloc"
            elif ft is FaultType.FunctionCallCorruption:
                ok = op == "call" and len(ins.args) >= 1
            else:
                ok = op == "lock" and _guards_store(fn, label, i)
            if ok:
                sites.append(Site(fn.name, label, i))
    return sites


def make_plan(fault_type, sites: list, rng_seed: int, occurrences: dict | None = None,
              program: Program | None = None) -> FaultPlan:
    """Draw one plan: a uniform site, a uniform dynamic occurrence, uniform parameters.

    ``occurrences`` maps a site's static key to how often it ran in the
    reference golden run; sites absent from it (or with zero executions) get
    occurrence 1.  ``program`` is needed to size the argument draw for
    ``FunctionCallCorruption``.
    """
    ft = FaultType(fault_type)
    if not sites:
        raise ValueError(f"no injection sites for {ft}")
    rng = SplitMix64(rng_seed)
    site = sites[rng.below(len(sites))]
    k = (occurrences or {}).get(site.static(), 0)
    occurrence = 1 + rng.below(k) if k > 0 else 1
    params: dict = {}
    if ft is FaultType.DataCorruption or ft is FaultType.InvalidPointer:
        params["bit"] = rng.below(64)
    elif ft in (FaultType.FileIoBufferOverflow, FaultType.BufferOverflowMalloc):
        params["delta"] = 1 + rng.below(SIZE_DELTA_MAX)
    elif ft is FaultType.FunctionCallCorruption:
        if program is None:
            raise ValueError("FunctionCallCorruption plans need the program to size the argument draw")
        nargs = len(program.functions[site.function].blocks[site.block][site.index].args)
        params["arg"] = rng.below(nargs)
        params["bit"] = rng.below(64)
    return FaultPlan(ft, Site(site.function, site.block, site.index, occurrence), rng_seed, params)


NEGATED_CMP = {"lt": "ge", "ge": "lt", "le": "gt", "gt": "le", "eq": "ne", "ne": "eq"}


def mutate_comparison(p: Program, function: str, block: str | None = None, index: int | None = None,
                      new_op: str | None = None) -> Program:
    """Copy of ``p`` with one ``cmp`` replaced (default: the first in ``function``, negated)."""
    q = copy.deepcopy(p)
    fn = q.functions[function]
    for label, i, ins in fn.instructions():
        if ins.op != "cmp":
            continue
        if block is not None and label != block:
            continue
        if index is not None and i != index:
            continue
        ins.cmp = new_op or NEGATED_CMP[ins.cmp]
        return q
    raise ValueError(f"no matching cmp instruction in {function!r}")


def plan_dict(plan: FaultPlan) -> dict:
    d = asdict(plan.site)
    d.update(fault_type=str(plan.fault_type), seed=plan.seed, parameters=dict(plan.parameters))
    return d
