"""scikit-learn style front end to inference and detection."""
from __future__ import annotations

import os

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .epa import Detection, detect
from .inference import DEFAULT_THRESHOLD, InvariantSet, infer
from .trace import TraceFile, parse_trace, read_trace
from .vm.machine import check_granularity

__all__ = ["InvariantDetector", "check_traces", "check_threshold"]


def check_threshold(threshold) -> float:
    t = float(threshold)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold!r}")
    return t


def _as_trace(x) -> TraceFile:
    if isinstance(x, TraceFile):
        return x
    if hasattr(x, "trace") and isinstance(x.trace, TraceFile):
        return x.trace
    if isinstance(x, (bytes, bytearray)):
        return parse_trace(bytes(x))
    if isinstance(x, (str, os.PathLike)):
        if isinstance(x, str) and x.startswith("IPATRACE"):
            return parse_trace(x)
        return read_trace(x)
    raise TypeError(f"cannot interpret {type(x).__name__} as a trace")


def check_traces(X, min_traces: int = 1) -> list[TraceFile]:
    """Coerce traces, run results, paths or raw trace text into TraceFiles."""
    if isinstance(X, (TraceFile, bytes, str, os.PathLike)):
        X = [X]
    traces = [_as_trace(x) for x in X]
    if len(traces) < min_traces:
        raise ValueError(f"need at least {min_traces} trace(s), got {len(traces)}")
    return traces


class InvariantDetector(BaseEstimator):
    """Learn likely invariants from fault-free traces, flag traces that break them.

    Parameters
    ----------
    threshold : float
        Minimum confidence for an invariant to be kept.
    granularity : {"function", "block"}
        Program points used for inference and detection.

    Attributes
    ----------
    invariants_ : InvariantSet
    n_invariants_ : int
    """

    def __init__(self, threshold: float = DEFAULT_THRESHOLD, granularity: str = "function"):
        self.threshold = threshold
        self.granularity = granularity

    def fit(self, X, y=None):
        traces = check_traces(X)
        self.invariants_ = infer(traces, check_threshold(self.threshold), check_granularity(self.granularity))
        self.n_invariants_ = len(self.invariants_)
        return self

    def detect(self, trace) -> Detection:
        check_is_fitted(self, "invariants_")
        return detect(self.invariants_, _as_trace(trace))

    def transform(self, X) -> np.ndarray:
        """Boolean matrix: row per trace, column per invariant, True when violated."""
        check_is_fitted(self, "invariants_")
        keys = {inv.key: j for j, inv in enumerate(self.invariants_)}
        traces = check_traces(X)
        out = np.zeros((len(traces), len(keys)), dtype=bool)
        for i, t in enumerate(traces):
            for k in detect(self.invariants_, t).violated_keys():
                out[i, keys[k]] = True
        return out

    def predict(self, X) -> np.ndarray:
        """True for each trace that violates at least one invariant."""
        return self.transform(X).any(axis=1)

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).predict(X)

    def get_feature_names_out(self, input_features=None) -> np.ndarray:
        check_is_fitted(self, "invariants_")
        return np.array(self.invariants_.keys(), dtype=object)

    @classmethod
    def from_invariants(cls, invariants: InvariantSet) -> "InvariantDetector":
        est = cls(threshold=invariants.threshold, granularity=invariants.granularity)
        est.invariants_ = invariants
        est.n_invariants_ = len(invariants)
        return est
