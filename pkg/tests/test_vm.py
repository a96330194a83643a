from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipa.trace import BB, ENTER, EXIT, parse_trace, write_trace
from ipa.vm import (
    BUILTINS, AsmError, GoldenRunError, builtin, builtin_source, default_input, default_step_budget,
    execute, golden_runs, load_program,
)
from ipa.vm.machine import flip_bit

TWO_RETS = """
.entry main
func clamp(x: i64) -> i64 {
entry:
    %neg = cmp lt %x, 0
    br_cond %neg, low, high
low:
    ret 0
high:
    %big = cmp gt %x, 10
    br_cond %big, cap, keep
cap:
    ret 10
keep:
    ret %x
}
func main(x: i64) {
entry:
    %y = call clamp(%x)
    output %y
    ret
}
"""


def test_workqueue_functions():
    p = builtin("workqueue")
    assert set(p.functions) == {"main", "addChunk"}
    assert p.entry == "main"


def test_every_function_has_one_ret_after_normalization():
    for name in BUILTINS + ("__two_rets",):
        p = load_program(TWO_RETS) if name == "__two_rets" else builtin(name)
        for fn in p.functions.values():
            assert sum(1 for _, _, i in fn.instructions() if i.op == "ret") == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(-50, 50))
def test_normalization_preserves_semantics(x):
    raw = load_program(TWO_RETS, normalize=False)
    norm = load_program(TWO_RETS)
    a, b = execute(raw, [x], 0), execute(norm, [x], 0)
    assert a.output == b.output == [min(max(x, 0), 10)]
    assert write_trace(a.trace) == write_trace(b.trace)


@pytest.mark.parametrize("src, fragment", [
    (".entry main\nfunc main() {\n}\n", "empty"),
    (".entry main\nfunc main() {\nentry:\n    br nowhere\n}\n", "nowhere"),
    (".entry main\nfunc main() {\nentry:\n    call missing()\n    ret\n}\n", "missing"),
    (".entry main\nfunc f(a: i64) {\nentry:\n    ret\n}\nfunc main() {\nentry:\n    call f()\n    ret\n}\n", "argument"),
    (".entry main\nfunc main() {\nentry:\n    %x = add 1\n    ret\n}\n", ""),
    (".entry main\nfunc main() {\nentry:\n    frobnicate %x\n    ret\n}\n", ""),
])
def test_load_errors(src, fragment):
    with pytest.raises(AsmError) as e:
        load_program(src)
    assert fragment in str(e.value)


def test_workqueue_single_thread_in_order():
    p = builtin("workqueue")
    for seed in range(20):
        r = execute(p, [[0, 1, 2, 3], 1], seed)
        assert r.outcome == "Normal" and r.output == [0, 1, 2, 3]


def test_workqueue_single_thread_identical_across_seeds():
    p = builtin("workqueue")
    traces = {write_trace(execute(p, [[0, 1, 2, 3], 1], s).trace) for s in range(10)}
    assert len(traces) == 1


def test_workqueue_reversing_schedule_exists():
    p = builtin("workqueue")
    seed = next(s for s in range(1000) if execute(p, [[0, 1, 2, 3], 4], s).output == [3, 2, 1, 0])
    assert execute(p, [[0, 1, 2, 3], 4], seed).output == [3, 2, 1, 0]


def test_workqueue_output_is_input_multiset():
    p = builtin("workqueue")
    for s in range(100):
        r = execute(p, [[0, 1, 2, 3], 4], s)
        assert Counter(r.output) == Counter([0, 1, 2, 3])


def test_qsortmt_small_input_every_seed():
    p = builtin("qsortmt")
    for s in range(100):
        assert execute(p, [[3, 1, 2], 4], s).output == [1, 2, 3]


def test_numerikernel_cndf_has_six_blocks():
    p = builtin("numerikernel")
    assert len(p.functions["cndf"].blocks) == 6


@pytest.mark.parametrize("name", BUILTINS)
@pytest.mark.parametrize("threads", [1, 4])
def test_builtins_run_normally(name, threads):
    p = builtin(name)
    inp = default_input(name, threads)
    budget = default_step_budget(p, inp)
    for s in range(10):
        r = execute(p, inp, s, step_budget=budget)
        assert r.outcome == "Normal" and not r.activated
        assert parse_trace(write_trace(r.trace)) == r.trace


def test_determinism():
    p = builtin("qsortmt")
    a = execute(p, default_input("qsortmt"), 11, granularity="block")
    b = execute(p, default_input("qsortmt"), 11, granularity="block")
    assert write_trace(a.trace) == write_trace(b.trace) and a.output == b.output and a.steps == b.steps


def _successors(fn):
    succ = {}
    for label, insns in fn.blocks.items():
        succ[label] = {t for i in insns for t in i.targets}
    return succ


@pytest.mark.parametrize("name", BUILTINS)
def test_per_thread_projection_follows_cfg(name):
    p = builtin(name)
    succ = {f: _successors(fn) for f, fn in p.functions.items()}
    for seed in range(5):
        t = execute(p, default_input(name), seed, granularity="block").trace
        stacks = {}
        for s in t.samples:
            stack = stacks.setdefault(s.thread_id, [])
            f = s.point.function
            if s.point.kind == ENTER:
                stack.append([f, None])
            elif s.point.kind == EXIT:
                assert stack and stack.pop()[0] == f
            else:
                top = stack[-1]
                assert top[0] == f
                if top[1] is None:
                    assert s.point.block == p.functions[f].entry_block
                else:
                    assert s.point.block in succ[f][top[1]]
                top[1] = s.point.block
        assert all(not st_ for st_ in stacks.values())


def test_block_trace_has_bb_samples():
    t = execute(builtin("numerikernel"), default_input("numerikernel"), 0, granularity="block").trace
    blocks = {s.point.block for s in t.samples if s.point.kind == BB and s.point.function == "cndf"}
    assert len(blocks) >= 5


def _prog(body, params="", args=()):
    return load_program(f".entry main\nfunc main({params}) {{\nentry:\n{body}\n}}\n"), list(args)


@pytest.mark.parametrize("body, reason", [
    ("    %a = alloc 2\n    %v = load %a, 2\n    ret", "out_of_bounds"),
    ("    %a = alloc 2\n    %b = add %a, 1000\n    %v = load %b, 0\n    ret", "invalid_address"),
    ("    %z = const 0\n    %v = div 1, %z\n    ret", "div_by_zero"),
])
def test_traps(body, reason):
    p, args = _prog(body)
    r = execute(p, args, 0, step_budget=100)
    assert r.outcome == "Trap" and r.trap_reason == reason


def test_deadlock():
    p = load_program(".entry main\nmutex m\nfunc main() {\nentry:\n    lock m\n    lock m\n    ret\n}\n")
    r = execute(p, [], 0, step_budget=100)
    assert r.outcome_label == "Trap(deadlock)"


def test_timeout_iff_budget_exhausted():
    p = load_program(".entry main\nfunc main() {\nentry:\n    br_cond true, entry, out\nout:\n    ret\n}\n")
    r = execute(p, [], 0, step_budget=57)
    assert r.outcome == "Timeout" and r.steps == 57
    q = builtin("workqueue")
    r = execute(q, default_input("workqueue"), 0)
    assert r.outcome == "Normal" and r.steps < default_step_budget(q, default_input("workqueue"))


def test_golden_runs():
    p = builtin("workqueue")
    traces = golden_runs(p, default_input("workqueue"), 5)
    assert len(traces) == 5
    single = golden_runs(p, default_input("workqueue", 1), 1)
    assert len(single) == 1
    concat = [s for t in traces for s in t.samples]
    sizes = [len(t.samples) for t in traces]
    split, k = [], 0
    for n in sizes:
        split.append(concat[k:k + n])
        k += n
    assert [len(x) for x in split] == sizes and split[2] == traces[2].samples


def test_golden_runs_abort_on_trap():
    p, _ = _prog("    %a = alloc 1\n    %v = load %a, 5\n    ret")
    with pytest.raises(GoldenRunError):
        golden_runs(p, [], 2, step_budget=100)


def test_input_arity_checked():
    with pytest.raises(ValueError):
        execute(builtin("workqueue"), [[1, 2]], 0)


def test_dump_builtin_source_loads():
    for name in BUILTINS:
        assert load_program(builtin_source(name)).entry == "main"
    with pytest.raises(KeyError):
        builtin("nginx")


@pytest.mark.parametrize("v, bit, expected", [(4, 0, 5), (5, 0, 4), (0, 63, -(2 ** 63)), (True, 3, False)])
def test_flip_bit(v, bit, expected):
    assert flip_bit(v, bit) == expected


def test_flip_bit_float_uses_ieee_bits():
    assert flip_bit(1.0, 63) == -1.0
    assert flip_bit(flip_bit(2.5, 17), 17) == 2.5


@pytest.mark.parametrize("inp", [[[[4]], 4], [[4], [4]], [["a"], 4], [[1.5], 4], [3, 4]])
def test_ill_typed_entry_arguments_rejected(inp):
    with pytest.raises(ValueError, match="expects"):
        execute(builtin("workqueue"), inp, 0)
