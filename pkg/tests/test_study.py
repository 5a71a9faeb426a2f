import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from syndss.codon_ctmc import LabelSet
from syndss.config import (
    DEFAULT_WINDOW,
    parse_config,
    scenario_config,
    window_spec,
)
from syndss.dss_engine import WindowSpec
from syndss.evolver import ConfigError, Scenario, ScenarioConfig
from syndss.study import (
    StudyKind,
    StudyResult,
    paired_less,
    replicate_seed,
    run_study,
    wald_interval,
)


def test_study_kinds():
    assert StudyKind.parse("type-i").scenario is Scenario.NULL
    assert StudyKind.parse("POWER").scenario is Scenario.RECOMBINATION
    assert StudyKind.parse(StudyKind.FPR).scenario is Scenario.CONVERGENT
    with pytest.raises(ValueError):
        StudyKind.parse("other")


def test_replicate_seeds_distinct_and_stable():
    seeds = [replicate_seed(7, i) for i in range(200)]
    assert len(set(seeds)) == 200
    assert seeds[3] == replicate_seed(7, 3) != replicate_seed(8, 3)
    assert all(0 <= s < 2**64 for s in seeds)


def test_wald_interval_reference_values():
    # 87 of 100: 87 (80.3, 93.7)
    lo, hi = wald_interval(0.87, 100)
    assert (round(100 * lo, 1), round(100 * hi, 1)) == (80.3, 93.7)
    lo, hi = wald_interval(0.66, 100)
    assert (round(100 * lo, 1), round(100 * hi, 1)) == (56.6, 75.4)
    assert wald_interval(0.0, 50) == (0.0, 0.0)
    assert wald_interval(0.01, 10)[0] == 0.0


@given(st.integers(0, 60), st.integers(0, 60), st.integers(0, 60))
def test_paired_less_against_binomial(only_a, only_b, both):
    a = [True] * only_a + [False] * only_b + [True] * both
    b = [False] * only_a + [True] * only_b + [True] * both
    p = paired_less(a, b)
    if only_a + only_b == 0:
        assert p == 1.0
    else:
        # lower binomial tail computed directly
        ref = sum(math.comb(only_a + only_b, k) for k in range(only_b + 1)) / 2 ** (only_a + only_b)
        assert p == pytest.approx(ref, rel=1e-9)


def test_result_table_and_csv():
    recs = [{"replicate": i, "error": None,
             "p_values": {"all": 0.01 if i < 3 else 0.5, "syn": 0.5}} for i in range(10)]
    recs.append({"replicate": 10, "error": "NonFinite: boom"})
    res = StudyResult(StudyKind.POWER, [LabelSet.ALL, LabelSet.SYN], recs)
    assert res.failures == 1 and len(res.completed) == 10
    assert res.rate("all") == 0.3 and res.rate(LabelSet.SYN) == 0.0
    lines = res.to_csv().splitlines()
    assert lines[0] == "scenario,label,replicates,rejections,rate,ci_low,ci_high"
    lo, hi = wald_interval(0.3, 10)
    assert lines[1] == f"power,all,10,3,0.300000,{lo:.6f},{hi:.6f}"


def test_run_study_journal_and_failures(tmp_path, monkeypatch):
    import syndss.study as study

    calls = []

    class Fake:
        def __init__(self, i):
            self.p_values = {LabelSet.ALL: 0.01 * i}
            self.observed = {LabelSet.ALL: float(i)}

    def fake_bootstrap(aln, spec, labels, B, seed, threads, orientation):
        calls.append(seed)
        i = len(calls)
        if i == 2:
            raise FloatingPointError("bad replicate")
        return Fake(i)

    monkeypatch.setattr(study, "bootstrap", fake_bootstrap)
    cfg = ScenarioConfig(lengths=(60, 60), seed=4)
    journal = tmp_path / "j.jsonl"
    res = run_study("type_i", 4, 3, cfg, WindowSpec(40, 20), ["all"], journal=journal)
    assert res.failures == 1 and len(res.completed) == 3
    lines = [json.loads(x) for x in journal.read_text().splitlines()]
    assert [x["replicate"] for x in lines] == [0, 1, 2, 3]
    assert lines[1]["error"].startswith("FloatingPointError")
    assert calls == [replicate_seed(4, i) for i in range(4)]
    # resume: nothing left to do
    again = run_study("type_i", 4, 3, cfg, WindowSpec(40, 20), ["all"], journal=journal)
    assert len(calls) == 4 and again.records == res.records
    # extend to six replicates
    more = run_study("type_i", 6, 3, cfg, WindowSpec(40, 20), ["all"], journal=journal)
    assert len(more.records) == 6 and calls[4:] == [replicate_seed(4, 4), replicate_seed(4, 5)]


def test_parse_config():
    opts = parse_config("# comment\nscenario = convergent\nregion = 11, 60  # inline\n"
                        "Key = Mixed\n")
    assert opts == {"scenario": "convergent", "region": "11, 60", "Key": "Mixed"}
    with pytest.raises(ConfigError):
        parse_config("no equals sign here\n")


def test_scenario_config_keys(tmp_path):
    cfg = scenario_config(parse_config(
        "scenario = convergent\nlengths = 50,70\nregion = 11,60\ntarget_taxa = 1,3\n"
        "preset = p2\nkappa = 3\ndiversity = low\nconvert_fraction = 0.5\nseed = 9\n"))
    assert cfg.scenario is Scenario.CONVERGENT and cfg.region == (10, 60)
    assert cfg.target_taxa == (1, 3) and cfg.m3.probs == (0.85, 0.14, 0.01)
    assert cfg.m3.kappa == 3.0 and cfg.branch_scale == 0.67 and cfg.seed == 9
    explicit = scenario_config({"omegas": "0.2,1,2", "probs": "0.5,0.3,0.2", "branch_scale": "2"})
    assert explicit.m3.omegas == (0.2, 1.0, 2.0) and explicit.branch_scale == 2.0
    (tmp_path / "t.nwk").write_text("((T1:1,T2:1):1,T3:1,(T4:1,T5:1):1);")
    own = scenario_config({"tree_a": "t.nwk"}, base_dir=tmp_path)
    assert np.allclose(own.tree_a.lengths, 1.0)
    for bad in ({"bogus": "1"}, {"scenario": "meteor"}, {"diversity": "extreme"},
                {"omegas": "1,2"}, {"probs": "0.5,0.5,0.5"}, {"region": "5"}):
        with pytest.raises(ConfigError):
            scenario_config(bad)


def test_window_spec_from_config():
    assert window_spec({}) == DEFAULT_WINDOW
    assert window_spec({"window": "636", "step": "9"}) == WindowSpec(212, 3)
    assert window_spec({"window_codons": "48", "step_codons": "2"}) == WindowSpec(48, 2)
    with pytest.raises(ConfigError):
        window_spec({"window": "7"})


def test_exact_binomial_reference():
    # the exact test used for criterion-style comparisons is scipy's binomtest
    assert stats.binomtest(2, 12, 0.5, alternative="less").pvalue == pytest.approx(
        sum(math.comb(12, k) for k in range(3)) / 2**12)
