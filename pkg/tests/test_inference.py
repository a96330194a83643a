import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipa.inference import (
    CLASSES, InferenceError, Invariant, InvariantSet, Predicate, check, classify, confidence, explain,
    infer, invariant_density, pair_entries, stability_curve,
)
from ipa.trace import ENTER, EXIT, ProgramPoint, TraceFile, TraceSample
from ipa.vm import BUILTINS, builtin, default_input, execute, golden_runs
from ipa.vm.builtins import straddle_data
from strategies import trace_files

ENTER_X = ProgramPoint("f", ENTER)
EXIT_X = ProgramPoint("f", EXIT)


def _trace(rows, point=ENTER_X, sig=(("x", "i64"), ("y", "i64"))):
    samples = [TraceSample(point, i, 0, tuple(zip((n for n, _ in sig), r)), i) for i, r in enumerate(rows)]
    return TraceFile([(point, sig)], samples)


def _inv(text, point=ENTER_X, n=10):
    pred = Predicate.parse(text)
    return Invariant(point, classify(pred), pred, n, confidence(pred, n))


def _sample(point=ENTER_X, **values):
    return TraceSample(point, 0, 0, tuple(values.items()))


# -- worked example ------------------------------------------------------------

def test_workqueue_fixed_input_invariants():
    p = builtin("workqueue")
    traces = [execute(p, [[4, 4, 4, 4], th], s).trace for th in (1, 4) for s in range(5)]
    texts = {(i.point.name, i.text) for i in infer(traces)}
    assert ("addChunk:::ENTER", "x == 4") in texts
    assert ("addChunk:::EXIT", "return == 1") in texts
    assert ("addChunk:::EXIT", "x == 4") in texts


def test_qsortmt_sorted_output_invariant():
    p = builtin("qsortmt")
    traces = golden_runs(p, default_input("qsortmt"), 5)
    exits = [s for t in traces for s in t.samples if s.point == ProgramPoint("sort_chunk", EXIT)]
    assert exits and all(list(s.values()["a"]) == sorted(s.values()["a"]) for s in exits)
    texts = {(i.point.name, i.cls, i.text) for i in infer(traces)}
    assert ("sort_chunk:::EXIT", "F", "a[] sorted by <=") in texts


def test_single_sample_inequality_not_emitted():
    s = infer([_trace([(1, 2)])])
    assert all(i.text != "x < y" for i in s)
    assert confidence(Predicate.parse("x < y"), 1) == 0.5


# -- confidence ----------------------------------------------------------------

def test_confidence_documented_values():
    ineq = Predicate.parse("x < y")
    assert confidence(ineq, 7) == 0.9921875
    assert confidence(ineq, 6) == 0.984375
    assert confidence(ineq, 7, falsified=True) == 0.0
    assert confidence(Predicate.parse("x == 4"), 7) == 0.9921875
    assert confidence(Predicate.parse("x one of {1, 2, 3}"), 4) == 1 - 3 / 16
    assert confidence(Predicate.parse("x one of {1, 2, 3}"), 1) == 0.0
    with pytest.raises(ValueError):
        confidence(ineq, 0)


def test_six_samples_only_pass_lower_threshold():
    rows = [(i, i + 1) for i in range(6)]
    t = _trace(rows)
    hi = {i.text for i in infer([t], 0.99)}
    lo = {i.text for i in infer([t], 0.80)}
    assert "x < y" not in hi and "x < y" in lo


@given(st.sampled_from(["x < y", "x == 4", "x one of {1, 2}", "a[] == [1, 2, 2]", "a[] sorted by <="]),
       st.integers(1, 200))
def test_confidence_monotone_and_bounded(text, n):
    p = Predicate.parse(text)
    c1, c2 = confidence(p, n), confidence(p, n + 1)
    assert 0.0 <= c1 <= c2 <= 1.0


def test_confidence_tends_to_one():
    assert confidence(Predicate.parse("x one of {1, 2, 3}"), 200) == 1.0


# -- check ---------------------------------------------------------------------

def test_check_examples():
    inv = _inv("x == 4")
    assert check(inv, _sample(x=4))
    assert not check(inv, _sample(x=5))
    c = _inv("a[] > b[]")
    assert not check(c, _sample(a=(2, 3), b=(1, 3)))
    assert check(c, _sample(a=(2, 4), b=(1, 3)))
    assert not check(c, _sample(a=(2, 4, 5), b=(1, 3)))


def test_missing_variable_is_a_violation():
    assert explain(_inv("x == 4"), _sample(y=4)) == "missing"


def test_orig_needs_pair():
    inv = _inv("x == orig(x) + 2", EXIT_X)
    assert check(inv, _sample(EXIT_X, x=5), _sample(x=3))
    assert not check(inv, _sample(EXIT_X, x=5), _sample(x=4))
    with pytest.raises(ValueError):
        check(inv, _sample(EXIT_X, x=5))


# -- classify ------------------------------------------------------------------

@pytest.mark.parametrize("text, cls", [
    ("a[] > b[]", "C"), ("return == 1", "H"), ("x one of {1, 2}", "E"), ("a[] == 0", "A"),
    ("a[] == [1, 2]", "B"), ("a[] sorted by >=", "F"), ("x == orig(x)", "D"), ("x < y", "G"),
    ("x != 0", "G"), ("return one of {1, 2}", "H"), ("x <= return", "H"),
])
def test_classify(text, cls):
    assert classify(Predicate.parse(text)) == cls


def test_eight_classes():
    assert list(CLASSES) == list("ABCDEFGH")


# -- density -------------------------------------------------------------------

def test_invariant_density():
    assert round(invariant_density(range(27), 330), 1) == 8.2
    assert round(invariant_density(range(80), 3158), 1) == 2.5
    assert invariant_density([], 100) == 0.0
    with pytest.raises(ValueError):
        invariant_density([], 0)
    assert invariant_density([1], builtin("workqueue")) == 100 / builtin("workqueue").lines_of_code


# -- catalogue coverage --------------------------------------------------------

def test_catalogue_forms():
    sig = (("a", "i64[]"), ("b", "i64[]"), ("c", "i64[]"), ("k", "i64"))
    rows = [((i, i + 1, i + 2), (0, 0, 0), (i - 1, i, i + 1), 2 + i % 3) for i in range(12)]
    s = infer([_trace(rows, sig=sig)])
    texts = {i.text: i.cls for i in s}
    assert texts["a[] sorted by <="] == "F"
    assert texts["b[] == [0, 0, 0]"] == "B"
    assert texts["a[] > c[]"] == "C"
    at_exit = {i.text: i.cls for i in infer([_trace(rows, point=EXIT_X, sig=sig)])}
    assert at_exit["b[] == 0"] == "A"
    assert texts["k one of {2, 3, 4}"] == "E"


def test_d_class_offset():
    sig = (("x", "i64"),)
    decls = [(ENTER_X, sig), (EXIT_X, sig)]
    samples = []
    for i in range(10):
        samples.append(TraceSample(ENTER_X, i, 0, (("x", i * 3),), len(samples)))
        samples.append(TraceSample(EXIT_X, i, 0, (("x", i * 3 + 2),), len(samples)))
    s = infer([TraceFile(decls, samples)])
    assert ("f:::EXIT", "x == orig(x) + 2") in {(i.point.name, i.text) for i in s}


# -- errors --------------------------------------------------------------------

def test_infer_errors():
    with pytest.raises(InferenceError):
        infer([])
    a = _trace([(1, 2)])
    b = _trace([(1, 2)], sig=(("x", "i64"),))
    with pytest.raises(InferenceError):
        infer([a, b])
    with pytest.raises(InferenceError):
        infer([a], granularity="block")


# -- stability -----------------------------------------------------------------

def test_workqueue_sets_identical_from_five_runs():
    p = builtin("workqueue")
    curve = stability_curve(lambda i: execute(p, default_input("workqueue"), 100 + i).trace)
    fps = {n: fp for n, _, fp in curve.rows}
    assert fps[5] == fps[10] == fps[15]
    assert curve.converged and curve.converged_at <= 5


def test_single_threaded_counts_constant():
    p = builtin("workqueue")
    curve = stability_curve(lambda i: execute(p, default_input("workqueue", 1), i).trace, ns=(2, 3, 4, 5, 10))
    assert len({c for _, c, _ in curve.rows}) == 1


def test_block_granularity_straddle_never_settles():
    p = builtin("numerikernel")
    curve = stability_curve(
        lambda i: execute(p, [straddle_data(i), 4], i, granularity="block").trace,
        ns=(1, 2, 3, 4, 5, 10, 15, 20), granularity="block")
    assert curve.converged is False


def test_single_n_has_undefined_convergence():
    p = builtin("workqueue")
    curve = stability_curve(lambda i: execute(p, default_input("workqueue"), i).trace, ns=(3,))
    assert curve.converged is None and len(curve.rows) == 1


# -- properties ----------------------------------------------------------------

def _split(t: TraceFile, k: int):
    a = TraceFile(t.declarations, [TraceSample(s.point, s.nonce, s.thread_id, s.bindings, i)
                                   for i, s in enumerate(t.samples[:k])])
    b = TraceFile(t.declarations, [TraceSample(s.point, s.nonce, s.thread_id, s.bindings, i)
                                   for i, s in enumerate(t.samples[k:])])
    return a, b


def _holds_everywhere(s: InvariantSet, traces) -> bool:
    for t in traces:
        pairs = pair_entries(t)
        index = s.by_point()
        for smp in t.samples:
            for inv in index.get(smp.point, ()):
                orig = pairs.get(smp.seq)
                if inv.predicate.kind == "orig" and orig is None:
                    continue
                if not check(inv, smp, orig):
                    return False
    return True


@settings(max_examples=120, deadline=None)
@given(trace_files(finite=True, max_events=30), st.sampled_from([0.0, 0.6, 0.99]))
def test_zero_training_false_positives(t, threshold):
    s = infer([t], threshold)
    assert _holds_everywhere(s, [t])
    assert all(i.confidence >= threshold for i in s)


@settings(max_examples=100, deadline=None)
@given(trace_files(finite=True, max_events=30), st.integers(0, 30))
def test_adding_runs_never_resurrects(t, k):
    a, b = _split(t, min(k, len(t.samples)))
    small = infer([a], 0.0)
    big = infer([a, b], 0.0)
    assert _holds_everywhere(big, [a, b])
    falsified = {i.key for i in small if not _holds_everywhere(InvariantSet([i]), [b])}
    assert not falsified & set(big.keys())


@settings(max_examples=100, deadline=None)
@given(trace_files(finite=True, max_events=30))
def test_threshold_monotone(t):
    k99, k80, k60 = (set(infer([t], th).keys()) for th in (0.99, 0.80, 0.60))
    assert k99 <= k80 <= k60


@settings(max_examples=80, deadline=None)
@given(trace_files(finite=True, max_events=30))
def test_text_roundtrip_and_determinism(t):
    s = infer([t])
    assert infer([t]).to_text() == s.to_text()
    back = InvariantSet.from_text(s.to_text())
    assert back.invariants == s.invariants and back.fingerprint() == s.fingerprint()


@settings(max_examples=80, deadline=None)
@given(trace_files(finite=True, max_events=20))
def test_canonical_order(t):
    s = infer([t], 0.0)
    assert [i.sort_key() for i in s] == sorted(i.sort_key() for i in s)
    assert all(i.cls == classify(i.predicate) for i in s)


@pytest.mark.parametrize("name", BUILTINS)
def test_builtin_thresholds_monotone(name):
    traces = golden_runs(builtin(name), default_input(name), 5)
    k99, k80, k60 = (set(infer(traces, th).keys()) for th in (0.99, 0.80, 0.60))
    assert k99 <= k80 <= k60


def test_invariant_file_rejects_garbage():
    with pytest.raises(ValueError):
        InvariantSet.from_text("f:::ENTER\tG\tx ~ 3\tn=3\tconf=0.5\n")
    with pytest.raises(ValueError):
        InvariantSet.from_text("f:::ENTER\tE\tx == 3\tn=3\tconf=0.5\n")
