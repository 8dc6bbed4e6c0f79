"""Performance History Table: per-model exit histograms and telemetry."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .errors import DomainError, StalenessError
from .model_spec import LOWER_BETTER, ModelRepository, ModelSpec, weights_bytes_at_depth


@dataclass
class ExitHistogram:
    counts: dict[int, int] = field(default_factory=dict)
    total: int = 0

    def add(self, layer: int, n: int = 1) -> None:
        self.counts[layer] = self.counts.get(layer, 0) + n
        self.total += n

    def fraction(self, layer: int) -> float:
        return self.counts.get(layer, 0) / self.total if self.total else 0.0

    def fractions(self) -> dict[int, float]:
        return {l: c / self.total for l, c in sorted(self.counts.items())} if self.total else {}

    @classmethod
    def from_fractions(cls, fr: Mapping[int, float], scale: int = 1_000_000) -> "ExitHistogram":
        h = cls()
        for l, f in fr.items():
            h.add(int(l), int(round(f * scale)))
        return h

    @classmethod
    def point_mass(cls, layer: int) -> "ExitHistogram":
        return cls({layer: 1}, 1)


@dataclass
class ModelProfile:
    exit_hist: ExitHistogram = field(default_factory=ExitHistogram)
    sum_neg_logprob: float = 0.0
    token_count: int = 0
    measured_tpot_s: float = 0.0
    measured_ttft_s: float = 0.0
    ttft_count: int = 0
    prompt_tokens: int = 0
    last_updated: int = 0


class PerformanceHistoryTable:
    """Telemetry gathered while profiling candidates."""

    def __init__(self, repo: ModelRepository, models: Iterable[str] | None = None):
        self.repo = repo
        ids = list(models) if models is not None else repo.ids
        self.profiles: dict[str, ModelProfile] = {m: ModelProfile() for m in ids}
        self.requests_seen = 0

    def _profile(self, model: str) -> ModelProfile:
        try:
            return self.profiles[model]
        except KeyError:
            raise DomainError(f"unknown model {model!r}") from None

    def has_data(self, model: str) -> bool:
        p = self.profiles.get(model)
        return p is not None and p.token_count > 0

    def to_obj(self) -> dict[str, Any]:
        out = {}
        for m, p in self.profiles.items():
            out[m] = {
                "exit_hist": {"counts": {str(k): v for k, v in sorted(p.exit_hist.counts.items())},
                              "total": p.exit_hist.total},
                "sum_neg_logprob": p.sum_neg_logprob,
                "token_count": p.token_count,
                "measured_tpot_s": p.measured_tpot_s,
                "measured_ttft_s": p.measured_ttft_s,
                "last_updated": p.last_updated,
            }
        return out


def record_token(pht: PerformanceHistoryTable, model: str, exit_layer: int, logprob: float, tpot_s: float) -> None:
    p = pht._profile(model)
    if exit_layer not in pht.repo[model].exit_layers:
        raise DomainError(f"{model}: layer {exit_layer} is not an exit layer")
    p.exit_hist.add(exit_layer)
    p.sum_neg_logprob += -logprob
    p.token_count += 1
    p.measured_tpot_s += (tpot_s - p.measured_tpot_s) / p.token_count
    p.last_updated = pht.requests_seen


def record_request(pht: PerformanceHistoryTable, model: str, ttft_s: float, prompt_len: int) -> None:
    p = pht._profile(model)
    p.ttft_count += 1
    p.measured_ttft_s += (ttft_s - p.measured_ttft_s) / p.ttft_count
    p.prompt_tokens += prompt_len
    pht.requests_seen += 1
    p.last_updated = pht.requests_seen


def perplexity(pht: PerformanceHistoryTable, model: str) -> float | None:
    """exp(mean negative log-probability); None when no tokens were seen."""
    p = pht._profile(model)
    if p.token_count == 0:
        return None
    return math.exp(p.sum_neg_logprob / p.token_count)


def choose_depth(hist: ExitHistogram, exits: Sequence[int], coverage_target: float) -> int:
    """Shallowest exit whose cumulative share reaches ``coverage_target``."""
    if hist.total <= 0:
        raise DomainError("empty exit histogram")
    if not 0 < coverage_target <= 1:
        raise DomainError(f"coverage_target must be in (0, 1], got {coverage_target}")
    cum = 0
    for e in exits:
        cum += hist.counts.get(e, 0)
        # integer comparison avoids float drift at the boundary
        if cum >= coverage_target * hist.total - 1e-9 * hist.total:
            return e
    return exits[-1]


def expected_token_latency(hist: ExitHistogram, spec: ModelSpec, depth: int) -> float:
    """Mean decode time per token when exits deeper than ``depth`` are capped."""
    if hist.total <= 0:
        raise DomainError("empty exit histogram")
    layers = sum(c * min(e, depth) for e, c in hist.counts.items())
    return layers / hist.total * spec.t_decode_per_layer_s


SLO_METRIC = {"throughput": "throughput", "accuracy": "perplexity", "response_time": "ttft", "energy": "energy"}
SLOS = tuple(SLO_METRIC)


def slo_value(pht: PerformanceHistoryTable, model: str, slo: str, depth: int) -> tuple[float, bool]:
    """Modeled SLO metric for ``model`` served greedily at ``depth``.

    Returns (value, lower_is_better).
    """
    spec = pht.repo[model]
    p = pht._profile(model)
    if slo == "throughput":
        return expected_token_latency(p.exit_hist, spec, depth), True
    if slo == "accuracy":
        ppl = perplexity(pht, model)
        assert ppl is not None
        return ppl, True
    if slo == "response_time":
        mean_prompt = p.prompt_tokens / p.ttft_count if p.ttft_count else 0.0
        return mean_prompt * depth * spec.t_prefill_per_layer_per_token_s, True
    if slo == "energy":
        layers = sum(c * min(e, depth) for e, c in p.exit_hist.counts.items()) / p.exit_hist.total
        return layers * spec.energy_per_layer_per_token_mwh, True
    raise DomainError(f"unknown SLO {slo!r}")


def best_model(pht: PerformanceHistoryTable, slo: str, depths: Mapping[str, int],
               candidates: Sequence[str] | None = None) -> str:
    """Best candidate for ``slo`` at its greedy depth; ties go to the smaller footprint."""
    cands = list(candidates) if candidates is not None else list(depths)
    if not cands:
        raise StalenessError("no candidates")
    missing = [m for m in cands if not pht.has_data(m) or m not in depths]
    if missing:
        raise StalenessError(f"no profile for {missing}")

    def key(m: str) -> tuple[float, int, int]:
        v, lower = slo_value(pht, m, slo, depths[m])
        spec = pht.repo[m]
        return (v if lower else -v, weights_bytes_at_depth(spec, depths[m]), cands.index(m))

    return min(cands, key=key)


def metric_lower_better(repo: ModelRepository, metric: str) -> bool:
    return repo.metric_directions.get(metric, LOWER_BETTER) == LOWER_BETTER
