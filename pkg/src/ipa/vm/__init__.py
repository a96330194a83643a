"""Miniature multithreaded VM: assembler, interpreter and built-in programs."""
from .asm import AsmError, Function, Instr, Program, load_program
from .builtins import BUILTINS, DEFAULT_THREADS, builtin, builtin_source, default_input, straddle_data
from .machine import (
    BASIC_BLOCK, FUNCTION, GRANULARITIES, GoldenRunError, RunResult, check_granularity,
    declarations, default_step_budget, execute, golden_runs,
)

__all__ = [
    "AsmError", "Function", "Instr", "Program", "load_program",
    "BUILTINS", "DEFAULT_THREADS", "builtin", "builtin_source", "default_input", "straddle_data",
    "BASIC_BLOCK", "FUNCTION", "GRANULARITIES", "GoldenRunError", "RunResult", "check_granularity",
    "declarations", "default_step_budget", "execute", "golden_runs",
]
