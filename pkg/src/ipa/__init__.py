"""Invariant-based error propagation analysis for multithreaded programs."""
from .estimator import InvariantDetector
from .inference import InvariantSet, infer

__all__ = ["InvariantDetector", "InvariantSet", "infer"]
