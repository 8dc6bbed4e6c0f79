from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eeserve.errors import ConfigError, FormatError, ValidationError
from eeserve.trace import (ExitObservation, GeneratorConfig, ModelTokenRecord, TokenRecord, earliest_confident_exit,
                           generate_workload, read_workload, workload_summary, write_workload)

from conftest import FIXTURES, small_workload


def _rec(confs, layers=(6, 12, 24)):
    obs = tuple(ExitObservation(l, 1, c, -0.1) for l, c in zip(layers, confs))
    return TokenRecord({"opt-1.3b": ModelTokenRecord(1, obs)})


def test_earliest_exit_examples():
    assert earliest_confident_exit(_rec((0.9, 0.95, 1.0)), "opt-1.3b", 0.7) == 6
    assert earliest_confident_exit(_rec((0.2, 0.5, 0.99)), "opt-1.3b", 0.7) == 24
    assert earliest_confident_exit(_rec((0.0, 0.1, 0.2)), "opt-1.3b", 0.0) == 6
    assert earliest_confident_exit(_rec((0.2, 0.5, 0.6)), "opt-1.3b", 0.7) == 24


@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.floats(0, 1), st.floats(0, 1))
def test_earliest_exit_monotone_in_th(confs, t1, t2):
    lo, hi = sorted((t1, t2))
    rec = _rec(sorted(confs))
    assert earliest_confident_exit(rec, "opt-1.3b", lo) <= earliest_confident_exit(rec, "opt-1.3b", hi)


def test_vectorized_exit_matches_scalar(opt_repo, opt_gen):
    wl = small_workload(opt_repo, opt_gen, 3, 1)
    for r in wl:
        for m, t in r.per_model.items():
            idx = t.earliest_exit_index(0.7)
            for i in range(t.n_tokens):
                assert t.layers[idx[i]] == earliest_confident_exit(r.token(i), m, 0.7)


def test_read_three_request_fixture(opt_repo):
    wl = read_workload(FIXTURES / "three_requests.jsonl", opt_repo)
    assert len(wl) == 3
    assert set(wl[0].per_model) == {"opt-1.3b", "opt-6.7b"}
    assert wl[0].per_model["opt-6.7b"].layers == (9, 17, 32)


def _one_line(tmp_path, mutate):
    line = json.loads((FIXTURES / "three_requests.jsonl").read_text().splitlines()[0])
    mutate(line)
    p = tmp_path / "w.jsonl"
    p.write_text(json.dumps(line) + "\n")
    return p


def _obs(line, model="opt-1.3b", tok=0):
    return line["tokens"][tok]["per_model"][model]["observations"]


@pytest.mark.parametrize("mutate,match", [
    (lambda l: _obs(l)[0].update(confidence=1.3), "confidence"),
    (lambda l: _obs(l)[1].update(logprob=0.5), "logprob"),
    (lambda l: l["tokens"][0]["per_model"].update({"gpt-9": {}}), "unknown model"),
    (lambda l: _obs(l).append(dict(_obs(l)[0])), "duplicate layer"),
    (lambda l: _obs(l)[0].update(layer=7), "not an exit layer"),
    (lambda l: _obs(l).reverse(), "not sorted"),
    (lambda l: _obs(l)[-1].update(token_id=_obs(l)[-1]["token_id"] + 1), "final"),
    (lambda l: l.update(prompt_len=0), "prompt_len"),
])
def test_read_validation(tmp_path, opt_repo, mutate, match):
    with pytest.raises(ValidationError, match=match):
        read_workload(_one_line(tmp_path, mutate), opt_repo)


def test_missing_observation(tmp_path, opt_repo, caplog):
    p = _one_line(tmp_path, lambda l: _obs(l).pop(1))
    with pytest.raises(ValidationError, match="missing observation"):
        read_workload(p, opt_repo)
    wl = read_workload(p, opt_repo, allow_missing=True)
    t = wl[0].per_model["opt-1.3b"]
    assert t.confidence[0, 1] == t.confidence[0, 0]
    assert "missing layer" in caplog.text


def test_non_monotone_confidence_warns(tmp_path, opt_repo, caplog):
    def mut(l):
        o = _obs(l)
        o[0]["confidence"], o[1]["confidence"] = 0.99, 0.1
    read_workload(_one_line(tmp_path, mut), opt_repo)
    assert "decreases" in caplog.text


def test_duplicate_ids_and_bad_json(tmp_path, opt_repo):
    line = (FIXTURES / "three_requests.jsonl").read_text().splitlines()[0]
    p = tmp_path / "d.jsonl"
    p.write_text(line + "\n" + line + "\n")
    with pytest.raises(ValidationError, match="duplicate request_id"):
        read_workload(p, opt_repo)
    p.write_text(line + "\n{oops\n")
    with pytest.raises(FormatError) as ei:
        read_workload(p, opt_repo)
    assert ei.value.line == 2


def test_roundtrip(tmp_path, opt_repo, opt_gen):
    wl = small_workload(opt_repo, opt_gen, 4, 3)
    p = tmp_path / "w.jsonl"
    write_workload(wl, p)
    back = read_workload(p, opt_repo)
    for a, b in zip(wl, back):
        assert a.request_id == b.request_id and a.prompt_len == b.prompt_len
        for m in a.per_model:
            np.testing.assert_array_equal(a.per_model[m].confidence, b.per_model[m].confidence)
            np.testing.assert_array_equal(a.per_model[m].token_id, b.per_model[m].token_id)


def test_generation_deterministic(tmp_path, opt_repo, opt_gen):
    digests = []
    for _ in range(2):
        p = tmp_path / "g.jsonl"
        write_workload(small_workload(opt_repo, opt_gen, 30, 11), p)
        digests.append(hashlib.sha256(p.read_bytes()).hexdigest())
    assert digests[0] == digests[1]
    p2 = tmp_path / "h.jsonl"
    write_workload(small_workload(opt_repo, opt_gen, 30, 12), p2)
    assert hashlib.sha256(p2.read_bytes()).hexdigest() != digests[0]


def test_prefix_stable(opt_repo, opt_gen):
    a = small_workload(opt_repo, opt_gen, 5, 4)
    b = small_workload(opt_repo, opt_gen, 9, 4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.per_model["opt-1.3b"].confidence, y.per_model["opt-1.3b"].confidence)


@pytest.fixture(scope="module")
def calib_trace(opt_repo, opt_gen):
    return generate_workload(opt_gen, opt_repo)


def test_calibrated_marginals(calib_trace, opt_gen):
    s = workload_summary(calib_trace, 0.7)
    assert s["tokens"] >= 50_000
    targets = {"opt-1.3b": {6: 73.0, 12: 4.7, 24: 22.3}, "opt-6.7b": {9: 73.6, 17: 4.8, 32: 21.6}}
    for m, row in targets.items():
        for l, pct in row.items():
            assert abs(100 * s["marginal"][m][l] - pct) <= 1.5, (m, l)


def test_calibrated_coupling(calib_trace):
    ia = np.concatenate([r.per_model["opt-1.3b"].earliest_exit_index(0.7) for r in calib_trace])
    ib = np.concatenate([r.per_model["opt-6.7b"].earliest_exit_index(0.7) for r in calib_trace])
    ht = ia > 0
    assert abs(np.mean(ib[ht] == 0) - 0.57) <= 0.02


def test_calibrated_unchanged_and_low_conf(calib_trace):
    s = workload_summary(calib_trace, 0.7)
    assert abs(s["unchanged"]["opt-1.3b"][6] - 0.90) <= 0.01
    assert abs(s["unchanged"]["opt-6.7b"][9] - 0.87) <= 0.01
    t = [r.per_model["opt-1.3b"] for r in calib_trace]
    conf = np.concatenate([x.confidence[:, 0] for x in t])
    same = np.concatenate([x.token_id[:, 0] == x.final_token_id for x in t])
    assert abs(same[conf < 0.7].mean() - 0.921) <= 0.01


def test_generated_confidence_non_decreasing(calib_trace):
    for r in calib_trace[:200]:
        for t in r.per_model.values():
            assert np.all(np.diff(t.confidence, axis=1) >= 0)
            assert np.all(t.token_id[:, -1] == t.final_token_id)
            assert np.all(t.logprob <= 0)


def _cfg_obj():
    return json.loads((FIXTURES / "opt_generator.json").read_text())


def test_row_not_summing_to_one(opt_repo):
    d = _cfg_obj()
    d["models"][0]["exit_distribution"]["6"] = 0.5
    with pytest.raises(ConfigError, match="sums to"):
        generate_workload(GeneratorConfig.from_obj(d), opt_repo)


def test_coupling_marginal_mismatch(opt_repo):
    d = _cfg_obj()
    d["coupling"]["opt-6.7b"]["6"] = {"9": 0.5, "17": 0.25, "32": 0.25}
    with pytest.raises(ConfigError, match="disagrees"):
        generate_workload(GeneratorConfig.from_obj(d), opt_repo)


def test_schedule_overdraws_background(opt_repo):
    d = _cfg_obj()
    d["schedule"]["episode"] = [["hard", 300]]
    d["schedule"]["period_requests"] = 320
    with pytest.raises(ConfigError):
        generate_workload(GeneratorConfig.from_obj(d), opt_repo)


def test_config_roundtrip(opt_gen):
    assert GeneratorConfig.from_obj(opt_gen.to_obj()) == opt_gen


@settings(max_examples=15, deadline=None)
@given(st.floats(0.05, 0.9), st.integers(0, 10**6))
def test_generated_exit_shares_follow_marginal(p6, seed):
    from eeserve.model_spec import load_repository
    repo = load_repository(FIXTURES / "opt_repository.json")
    rest = 1 - p6
    cfg = GeneratorConfig(models=(("opt-1.3b", {6: p6, 12: rest / 2, 24: rest / 2}),), num_requests=40, seed=seed)
    s = workload_summary(generate_workload(cfg, repo), 0.7)
    n = s["tokens"]
    assert abs(s["marginal"]["opt-1.3b"][6] - p6) <= 5 * (p6 * (1 - p6) / n) ** 0.5 + 1e-9
