from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from eeserve.errors import CapacityError, ConfigError, StalenessError
from eeserve.memory_model import LoadState, MemoryConfig
from eeserve.model_spec import ModelRepository
from eeserve.pht import ExitHistogram, PerformanceHistoryTable
from eeserve.policy import (BreachTracker, LoadMore, PolicyConfig, Switch, decide_action, observe_token,
                            plan_load, rank_options, select_candidates, should_reassess)

from conftest import toy_spec

GB = 10**9


def test_policy_defaults_and_bounds():
    c = PolicyConfig()
    assert (c.k, c.n_eval_requests, c.th, c.cbc_max, c.window, c.ri, c.coverage_target) == (3, 5, 0.7, 50, 100, 150, 0.7)
    for bad in (dict(cbc_max=0), dict(cbc_max=101), dict(k=0), dict(ri=0), dict(th=1.5), dict(slo="speed"),
                dict(coverage_target=0)):
        with pytest.raises(ConfigError):
            PolicyConfig(**bad)


def test_trigger_on_breach_51():
    cfg = PolicyConfig()
    t = BreachTracker()
    out = [observe_token(t, True, cfg) for _ in range(51)]
    assert out == [False] * 50 + [True]
    assert (t.cbc, t.tokens_in_window) == (0, 0)


def test_fifty_breaches_then_reset():
    cfg = PolicyConfig()
    t = BreachTracker()
    out = [observe_token(t, True, cfg) for _ in range(50)] + [observe_token(t, False, cfg) for _ in range(50)]
    assert not any(out)
    assert (t.cbc, t.tokens_in_window) == (0, 0)
    assert not any(observe_token(t, False, cfg) for _ in range(10_000))


@given(st.lists(st.booleans(), min_size=1, max_size=600))
def test_cbc_never_fires_at_or_below_cbc_max_per_window(seq):
    cfg = PolicyConfig()
    t = BreachTracker()
    breaches = n = 0
    for b in seq:
        fired = observe_token(t, b, cfg)
        n += 1
        breaches += b
        assert fired == (breaches == cfg.cbc_max + 1)
        if fired or n == cfg.window:
            breaches = n = 0


def test_should_reassess():
    cfg = PolicyConfig()
    assert not should_reassess(149, cfg)
    assert should_reassess(150, cfg)
    assert should_reassess(1, PolicyConfig(ri=1))


def _five():
    specs = [toy_spec(f"m{i}", repo_metrics={"throughput": float(t), "perplexity": p})
             for i, (t, p) in enumerate([(5, 2.0), (9, 1.5), (7, 1.2), (1, 3.0), (8, 1.9)])]
    return ModelRepository(tuple(specs), {"throughput": "higher_better", "perplexity": "lower_better"})


def test_select_candidates_ranking():
    repo = _five()
    mem = MemoryConfig(capacity_bytes=GB)
    assert select_candidates(repo, "throughput", mem, 3) == ["m1", "m4", "m2"]
    assert select_candidates(repo, "accuracy", mem, 2) == ["m2", "m1"]
    with pytest.raises(CapacityError):
        select_candidates(repo, "throughput", MemoryConfig(capacity_bytes=100), 3)
    with pytest.raises(ConfigError):
        select_candidates(repo, "energy", mem, 3)


def test_select_candidates_pre_eval_accuracy(opt_repo):
    mem = MemoryConfig(capacity_bytes=40 * GB)
    assert select_candidates(opt_repo, "accuracy", mem, 2) == ["opt-6.7b", "opt-1.3b"]
    assert select_candidates(opt_repo, "throughput", mem, 3) == ["opt-1.3b", "opt-6.7b"]
    # a model that cannot be loaded fully is never a candidate
    assert select_candidates(opt_repo, "accuracy", MemoryConfig(capacity_bytes=10 * GB), 2) == ["opt-1.3b"]


def _pht(repo, fr):
    p = PerformanceHistoryTable(repo)
    for m, f in fr.items():
        p.profiles[m].exit_hist = ExitHistogram.from_fractions(f)
        p.profiles[m].token_count = p.profiles[m].exit_hist.total
    return p


CALIB = {"opt-1.3b": {6: 0.73, 12: 0.047, 24: 0.223}, "opt-6.7b": {9: 0.736, 17: 0.048, 32: 0.216}}
DEPTHS = {"opt-1.3b": 6, "opt-6.7b": 9}


def test_identical_candidate_means_load_more(opt_repo):
    p = _pht(opt_repo, CALIB)
    mem = MemoryConfig(capacity_bytes=40 * GB, load_bandwidth_bytes_per_s=10 * GB)
    load = LoadState.empty(opt_repo).with_depth("opt-1.3b", 6)
    a = decide_action(p, ("opt-1.3b", 6), ["opt-1.3b"], DEPTHS, mem, load, PolicyConfig(), batch_limit=1)
    assert a == LoadMore(12)


def test_calibrated_histograms_prefer_load_more(opt_repo):
    # hand check: LD to 12 costs 6*187.2 MB/10 GB/s/1000 + (0.73*6 + 0.27*12)*0.971 ms = 7.51 ms,
    # SW to 6.7B@9 costs 7.57 GB/10 GB/s/1000 + 9*1.045 ms = 10.16 ms
    p = _pht(opt_repo, CALIB)
    mem = MemoryConfig(capacity_bytes=40 * GB, load_bandwidth_bytes_per_s=10 * GB)
    load = LoadState.empty(opt_repo).with_depth("opt-1.3b", 6)
    opts = rank_options(p, ("opt-1.3b", 6), ["opt-1.3b", "opt-6.7b"], DEPTHS, mem, load, PolicyConfig(), batch_limit=1)
    assert [o.action for o in opts] == [LoadMore(12), Switch("opt-6.7b", 9)]
    assert opts[0].cost_s == pytest.approx(6 * 187_222_222 / 10e9 / 1000 + 7.62 * 0.010 / 10.296, rel=1e-9)
    assert opts[1].cost_s == pytest.approx(7.57e9 / 10e9 / 1000 + 9 * 0.015 / 14.352, rel=1e-9)


def test_deep_1p3b_profile_switches(opt_repo):
    # 1.3B whose profile is dominated by deep exits: LD to 12 costs about 11.4 ms vs 10.2 ms for SW
    p = _pht(opt_repo, {"opt-1.3b": {6: 0.05, 12: 0.05, 24: 0.90}, "opt-6.7b": CALIB["opt-6.7b"]})
    mem = MemoryConfig(capacity_bytes=40 * GB, load_bandwidth_bytes_per_s=10 * GB)
    load = LoadState.empty(opt_repo).with_depth("opt-1.3b", 6)
    assert decide_action(p, ("opt-1.3b", 6), ["opt-1.3b", "opt-6.7b"], DEPTHS, mem, load,
                         PolicyConfig(), batch_limit=1) == Switch("opt-6.7b", 9)


def test_full_depth_only_switch(opt_repo):
    p = _pht(opt_repo, CALIB)
    mem = MemoryConfig(capacity_bytes=40 * GB)
    load = LoadState.empty(opt_repo).with_depth("opt-1.3b", 24)
    assert decide_action(p, ("opt-1.3b", 24), ["opt-1.3b", "opt-6.7b"], DEPTHS, mem, load,
                         PolicyConfig(), batch_limit=1) == Switch("opt-6.7b", 9)
    assert rank_options(p, ("opt-1.3b", 24), ["opt-1.3b"], DEPTHS, mem, load, PolicyConfig(), batch_limit=1) == []


def test_zero_new_bytes_wins_under_slow_loading(opt_repo):
    p = _pht(opt_repo, CALIB)
    mem = MemoryConfig(capacity_bytes=40 * GB, load_bandwidth_bytes_per_s=1.0)
    load = LoadState.empty(opt_repo).with_depth("opt-1.3b", 6).with_depth("opt-6.7b", 32)
    opts = rank_options(p, ("opt-1.3b", 6), ["opt-1.3b", "opt-6.7b"], DEPTHS, mem, load, PolicyConfig(), batch_limit=1)
    assert opts[0].action == Switch("opt-6.7b", 9) and opts[0].new_bytes == 0
    # the resident 6.7B copy is kept at its loaded depth because nothing forces truncation
    assert opts[0].load.depth("opt-6.7b") == 32


def test_switch_evicts_when_both_do_not_fit(opt_repo):
    # 6.7B@9 (7.57 GB) + 1.3B@6 (1.54 GB) exceeds 8.5 GB, so the plan drops 1.3B
    load = LoadState.empty(opt_repo).with_depth("opt-1.3b", 6)
    mem = MemoryConfig(capacity_bytes=8_500_000_000)
    plan, batch = plan_load(load, mem, "opt-6.7b", 9, batch_limit=1)
    assert plan.depth("opt-1.3b") == 0 and plan.depth("opt-6.7b") == 9 and batch == 1
    mem = MemoryConfig(capacity_bytes=20 * GB)
    plan, _ = plan_load(load, mem, "opt-6.7b", 9, batch_limit=1)
    assert plan.depth("opt-1.3b") == 6


def test_memory_bound_plan_drops_models_that_cost_batch(opt_repo):
    load = LoadState.empty(opt_repo).with_depth("opt-1.3b", 24)
    mem = MemoryConfig(capacity_bytes=40 * GB)
    plan, batch = plan_load(load, mem, "opt-6.7b", 9, batch_limit=0)
    assert plan.depth("opt-1.3b") == 0
    plan1, _ = plan_load(load, mem, "opt-6.7b", 9, batch_limit=1)
    assert plan1.depth("opt-1.3b") == 24


def test_rank_requires_profiles(opt_repo):
    p = _pht(opt_repo, {"opt-1.3b": CALIB["opt-1.3b"]})
    mem = MemoryConfig(capacity_bytes=40 * GB)
    load = LoadState.empty(opt_repo).with_depth("opt-1.3b", 6)
    with pytest.raises(StalenessError):
        rank_options(p, ("opt-1.3b", 6), ["opt-1.3b", "opt-6.7b"], DEPTHS, mem, load, PolicyConfig(), batch_limit=1)
