import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ipa.estimator import InvariantDetector, check_threshold, check_traces
from ipa.injector import mutate_comparison
from ipa.trace import write_trace
from ipa.vm import builtin, execute, golden_runs, default_input

WQ = builtin("workqueue")


def test_params_roundtrip():
    est = InvariantDetector(threshold=0.8, granularity="block")
    assert est.get_params() == {"threshold": 0.8, "granularity": "block"}
    assert clone(est).get_params() == est.get_params()
    est.set_params(threshold=0.6)
    assert est.threshold == 0.6


def test_fit_predict():
    train = [execute(WQ, [[4, 4, 4, 4], th], s).trace for th in (1, 4) for s in range(5)]
    est = InvariantDetector().fit(train)
    assert est.n_invariants_ == len(est.invariants_) > 0
    mutant = mutate_comparison(WQ, "addChunk")
    X = [execute(WQ, [[4, 4, 4, 4], 4], 99).trace, execute(mutant, [[4, 4, 4, 4], 4], 99).trace]
    pred = est.predict(X)
    assert pred.dtype == bool and pred.tolist() == [False, True]
    M = est.transform(X)
    assert M.shape == (2, est.n_invariants_) and not M[0].any() and M[1].any()
    assert len(est.get_feature_names_out()) == est.n_invariants_
    assert len(est.detect(X[1])) > 0


def test_accepts_paths_bytes_and_results(tmp_path):
    r = execute(WQ, default_input("workqueue"), 0)
    path = tmp_path / "t.trace"
    path.write_bytes(write_trace(r.trace))
    ts = check_traces([r, path, str(path), write_trace(r.trace)])
    assert all(t == r.trace for t in ts)


def test_validation():
    with pytest.raises(NotFittedError):
        InvariantDetector().predict([])
    with pytest.raises(ValueError):
        check_threshold(1.2)
    with pytest.raises(ValueError):
        check_traces([])
    with pytest.raises(TypeError):
        check_traces([42])
    with pytest.raises(ValueError):
        InvariantDetector(granularity="loop").fit(golden_runs(WQ, default_input("workqueue"), 2))


def test_fit_predict_on_training_is_clean():
    train = golden_runs(WQ, default_input("workqueue"), 5)
    assert not np.any(InvariantDetector().fit_predict(train))
