"""Built-in benchmark programs, shipped as assembly text resources.

Every built-in's entry function is ``main(data, nthreads)``; ``default_input``
builds that argument list from the benchmark's stock data.
"""
from __future__ import annotations

from importlib import resources

from .asm import Program, load_program

BUILTINS = ("workqueue", "qsortmt", "numerikernel", "racer", "httpish")
DEFAULT_THREADS = 4

DEFAULT_DATA = {
    "workqueue": [0, 1, 2, 3],
    "qsortmt": [5, 3, 9, 1, 7, 2, 8, 6, 4, 0, 11, 10],
    "numerikernel": [0.5, -1.25, 2.0, -0.75, 1.5, -2.5, 0.25, -0.5],
    "racer": [25],
    "httpish": [1, 2, 1, 3, 2, 1, 3, 2],
}


def builtin_source(name: str) -> str:
    if name not in BUILTINS:
        raise KeyError(f"unknown built-in {name!r}; choose from {', '.join(BUILTINS)}")
    return resources.files(__package__).joinpath("programs", f"{name}.ipa").read_text()


def builtin(name: str) -> Program:
    return load_program(builtin_source(name))


def default_input(name: str, threads: int = DEFAULT_THREADS, data=None) -> list:
    if name not in BUILTINS:
        raise KeyError(f"unknown built-in {name!r}")
    return [list(DEFAULT_DATA[name] if data is None else data), int(threads)]


def straddle_data(run: int, size: int = 8) -> list[float]:
    """Sign-alternating inputs whose magnitude grows with the run index.

    Every profiling run lands on both sides of ``cndf``'s sign branch, and
    each new run widens the per-block value ranges.
    """
    scale = 0.25 * (1 + run)
    return [(-1.0 if j % 2 else 1.0) * (j + 1) * scale for j in range(size)]


INPUT_GENERATORS = {"straddle": straddle_data}
