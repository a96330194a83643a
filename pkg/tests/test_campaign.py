import json
from dataclasses import dataclass

import pytest

from ipa.campaign import (
    BENIGN, CRASH_HANG, OUTCOMES, SDC, CampaignConfig, ConfigError, RunRecord, class_coverage,
    classify_outcome, correlate, fault_coverage, invariant_coverage, load_config, overhead_ratios,
    run_campaign,
)
from ipa.vm.machine import NORMAL, TIMEOUT, TRAP


@dataclass
class _Run:
    outcome: str
    output: list


def _rec(i, violated=()):
    return RunRecord(i, {}, True, "Normal", BENIGN, tuple(sorted(violated)), 0, 0, 0)


def test_classify_outcome():
    assert classify_outcome(_Run(TRAP, []), [1]) == CRASH_HANG
    assert classify_outcome(_Run(TIMEOUT, [1]), [1]) == CRASH_HANG
    assert classify_outcome(_Run(NORMAL, [1, 3, 2]), [1, 2, 3], "sequence") == SDC
    assert classify_outcome(_Run(NORMAL, [3, 2, 1, 0]), [0, 1, 2, 3], "multiset") == BENIGN
    assert classify_outcome(_Run(NORMAL, [3, 2, 1, 1]), [0, 1, 2, 3], "multiset") == SDC


def test_fault_coverage():
    recs = [_rec(0, ["a"]), _rec(1, ["b"]), _rec(2, ["a", "b"]), _rec(3)]
    cov, lo, hi = fault_coverage(recs)
    assert cov == 0.75 and lo <= cov <= hi
    cov, lo, hi = fault_coverage([_rec(i) for i in range(10)])
    assert cov == 0.0 and lo == 0.0
    with pytest.raises(ValueError):
        fault_coverage([])


def test_class_coverage_union():
    recs = [_rec(0, ["i1"]), _rec(1, ["i1", "i2"]), _rec(2, ["i2"]), _rec(3)]
    assert class_coverage(recs, "G", ["i1", "i2"]) == 0.75
    assert class_coverage(recs, "G", []) is None
    per = invariant_coverage(recs, ["i1", "i2"])
    assert per == {"i1": 0.5, "i2": 0.5}
    assert class_coverage(recs, "G", ["i1", "i2"]) >= max(per.values())


def test_overhead_ratios_table_rows():
    s, _ = overhead_ratios({"I1": 5.5, "I2": 5.4, "I3": 0.4, "E1": 1.1, "E3": 1.4})
    assert abs(s - 1.1 / 10.9) < 1e-12 and round(s, 1) == 0.1
    s, _ = overhead_ratios({"I1": 32, "I2": 18.3, "I3": 1, "E1": 49.2, "E3": 1})
    assert round(s, 2) == 0.98
    s, d = overhead_ratios({"I1": 2.0, "I2": 0.0, "I3": 1.0, "E1": 2.0, "E3": 1.0})
    assert s == 1.0 and d == 3.0 / 1.4
    _, d = overhead_ratios({"I1": 5.5, "I2": 5.4, "I3": 0.4, "E1": 1.1, "E3": 1.4})
    assert abs(d - 2.5 / 1.5) < 1e-12
    with pytest.raises(ValueError):
        overhead_ratios({"I1": 0, "I2": 0, "I3": 0, "E1": 1, "E3": 1})


@pytest.mark.parametrize("bad", [
    {"injections": 0}, {"profiling_runs": 0}, {"threshold": 1.5}, {"program": "nginx"},
    {"fault_types": ["Cosmic"]}, {"granularity": "loop"}, {"version": 2},
    {"input": {"generator": "nope"}},
])
def test_bad_configs_rejected(bad):
    with pytest.raises(ConfigError):
        CampaignConfig.from_dict({"version": 1, **bad})


def test_config_needs_version_and_known_keys(tmp_path):
    with pytest.raises(ConfigError):
        CampaignConfig.from_dict({"program": "workqueue"})
    with pytest.raises(ConfigError):
        CampaignConfig.from_dict({"version": 1, "colour": "red"})
    (tmp_path / "p.ipa").write_text(".entry main\nfunc main(x: i64) {\nentry:\n    output %x\n    ret\n}\n")
    (tmp_path / "c.json").write_text(json.dumps({"version": 1, "program": "mine", "source": "@p.ipa",
                                                  "input": [3], "injections": 2}))
    cfg = load_config(tmp_path / "c.json")
    assert cfg.load().entry == "main" and cfg.run_input(cfg.load()) == [3]


@pytest.fixture(scope="module")
def workqueue_campaign():
    return run_campaign(CampaignConfig(program="workqueue", injections=50))


def test_workqueue_campaign_shape(workqueue_campaign):
    res = workqueue_campaign
    assert res.converged
    rows = {f.fault_type: f for f in res.faults}
    assert len(rows) == 6
    assert rows["FileIoBufferOverflow"].skipped
    for f in res.faults:
        if f.skipped:
            continue
        assert f.activated == 50 == sum(f.tallies[o] for o in OUTCOMES)
        assert all(r.activated for r in f.runs)
        assert f.ci_low <= f.coverage <= f.ci_high
        for c, v in f.class_coverage.items():
            assert v is None or 0 <= v <= f.coverage
        assert all(v <= f.coverage for v in f.invariant_coverage.values())


def test_campaign_is_reproducible(workqueue_campaign):
    again = run_campaign(CampaignConfig(program="workqueue", injections=50))
    assert again.to_json() == workqueue_campaign.to_json()
    assert again.runs_jsonl() == workqueue_campaign.runs_jsonl()


def test_parallel_campaign_matches_sequential(workqueue_campaign):
    par = run_campaign(CampaignConfig(program="workqueue", injections=50), jobs=3)
    assert par.to_json() == workqueue_campaign.to_json()


def test_campaign_files(tmp_path, workqueue_campaign):
    names = {p.name for p in workqueue_campaign.write(tmp_path)}
    assert names == {"campaign.json", "table6.csv", "table5.csv", "coverage.csv", "runs.jsonl", "invariants.txt"}
    header = (tmp_path / "table6.csv").read_text().splitlines()[0]
    assert header == "program,lines_of_code,invariants,I1,I2,I3,E1,E3,S,D"
    doc = json.loads((tmp_path / "campaign.json").read_text())
    assert doc["status"] == "ok" and doc["costs"]["S"] > 0


def test_unstable_campaign_refused():
    cfg = CampaignConfig(program="numerikernel", granularity="block",
                         input={"generator": "straddle", "size": 8}, injections=5)
    res = run_campaign(cfg)
    assert res.status == "non-converged" and res.faults == []


def test_timings_are_separate():
    res = run_campaign(CampaignConfig(program="workqueue", injections=3), timings=True)
    assert set(res.seconds) >= {"I1", "I2", "I3", "E1", "E3", "S", "D"}
    assert "seconds" not in res.to_json()


def test_correlate(workqueue_campaign):
    other = run_campaign(CampaignConfig(program="httpish", injections=10))
    third = run_campaign(CampaignConfig(program="racer", injections=10))
    out = correlate([workqueue_campaign, other, third], ["lines_of_code", "branches"])
    assert set(out) == {"lines_of_code", "branches"}
    for r in out.values():
        assert r is None or r.rho is None or -1 <= r.rho <= 1
