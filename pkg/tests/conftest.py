from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from eeserve.memory_model import MemoryConfig
from eeserve.model_spec import ModelRepository, ModelSpec, load_repository
from eeserve.trace import GeneratorConfig, TraceRequest, generate_workload, load_generator_config

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"


def fixture_path(name: str) -> Path:
    return FIXTURES / name


@pytest.fixture(scope="session")
def opt_repo() -> ModelRepository:
    return load_repository(FIXTURES / "opt_repository.json")


@pytest.fixture(scope="session")
def opt_gen() -> GeneratorConfig:
    return load_generator_config(FIXTURES / "opt_generator.json")


@pytest.fixture(scope="session")
def calib_experiment() -> dict:
    return json.loads((FIXTURES / "table3.json").read_text())


@pytest.fixture(scope="session")
def calib_memory(calib_experiment) -> MemoryConfig:
    return MemoryConfig(**calib_experiment["memory"])


def small_workload(repo: ModelRepository, gen: GeneratorConfig, n: int, seed: int) -> list[TraceRequest]:
    return generate_workload(dataclasses.replace(gen, num_requests=n, seed=seed), repo)


def toy_spec(mid: str = "toy", layers: int = 4, exits=(2, 4), **kw) -> ModelSpec:
    base = dict(per_layer_weight_bytes=100, base_weight_bytes=50, kv_bytes_per_token_per_layer=1,
                t_decode_per_layer_s=0.001, t_prefill_per_layer_per_token_s=0.0001,
                repo_metrics={"throughput": 10.0})
    base.update(kw)
    return ModelSpec(mid, layers, tuple(exits), **base)


def const_request(rid: int, repo: ModelRepository, conf: dict[str, list[list[float]]], prompt_len: int = 8,
                  arrival: float = 0.0, logprob: float = -0.1) -> TraceRequest:
    """A request whose per-model confidences are given token by token."""
    from eeserve.trace import ModelTrace

    per_model = {}
    for m, rows in conf.items():
        c = np.array(rows, dtype=float)
        n, e = c.shape
        tok = np.tile(np.arange(n)[:, None], (1, e))
        per_model[m] = ModelTrace(repo[m].exit_layers, c, tok, np.full((n, e), logprob), np.arange(n))
    return TraceRequest(rid, arrival, prompt_len, per_model)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
