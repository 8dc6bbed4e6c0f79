"""Control plane: candidate selection, breach tracking, load-vs-switch, reassessment."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence, Union

from .errors import CapacityError, ConfigError, StalenessError
from .memory_model import LoadState, MemoryConfig, fits, load_time_s, max_batch_size
from .model_spec import HIGHER_BETTER, ModelRepository
from .pht import SLO_METRIC, SLOS, ExitHistogram, PerformanceHistoryTable, expected_token_latency

__all__ = [
    "PolicyConfig", "BreachTracker", "Stay", "LoadMore", "Switch", "Action", "Option",
    "select_candidates", "observe_token", "expected_token_latency", "rank_options",
    "decide_action", "should_reassess", "plan_load", "TRIGGER", "NO_TRIGGER",
]

TRIGGER = True
NO_TRIGGER = False

# default metric direction when the repository does not declare one
_DEFAULT_DIRECTION = {"throughput": HIGHER_BETTER}


@dataclass
class PolicyConfig:
    k: int = 3
    n_eval_requests: int = 5
    th: float = 0.7
    cbc_max: int = 50
    window: int = 100
    ri: int = 150
    coverage_target: float = 0.70
    horizon_tokens: int = 1000
    slo: str = "throughput"

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not 0 < self.cbc_max <= self.window:
            raise ConfigError("policy: need 0 < cbc_max <= window")
        if self.k < 1:
            raise ConfigError("policy: k must be >= 1")
        if self.ri < 1:
            raise ConfigError("policy: ri must be >= 1")
        if self.horizon_tokens < 1:
            raise ConfigError("policy: horizon_tokens must be >= 1")
        if self.n_eval_requests < 1:
            raise ConfigError("policy: n_eval_requests must be >= 1")
        if not 0 <= self.th <= 1:
            raise ConfigError("policy: th must be in [0,1]")
        if not 0 < self.coverage_target <= 1:
            raise ConfigError("policy: coverage_target must be in (0,1]")
        if self.slo not in SLOS:
            raise ConfigError(f"policy: slo must be one of {list(SLOS)}, got {self.slo!r}")

    def to_obj(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class BreachTracker:
    cbc: int = 0
    tokens_in_window: int = 0

    def reset(self) -> None:
        self.cbc = 0
        self.tokens_in_window = 0


@dataclass(frozen=True)
class Stay:
    kind = "stay"


@dataclass(frozen=True)
class LoadMore:
    target_depth: int
    kind = "ld"


@dataclass(frozen=True)
class Switch:
    model: str
    depth: int
    kind = "sw"


Action = Union[Stay, LoadMore, Switch]


def select_candidates(repo: ModelRepository, slo: str, hw: MemoryConfig, k: int) -> list[str]:
    """Top-k models by the SLO's repository metric among those that fit fully."""
    if slo not in SLO_METRIC:
        raise ConfigError(f"unknown SLO {slo!r}")
    metric = SLO_METRIC[slo]
    direction = repo.metric_directions.get(metric, _DEFAULT_DIRECTION.get(metric, "lower_better"))
    fitting = [m for m in repo.models if m.full_bytes <= hw.usable_bytes]
    if not fitting:
        raise CapacityError("no model in the repository fits in device memory")
    for m in fitting:
        if metric not in m.repo_metrics:
            raise ConfigError(f"model {m.id!r} has no repository metric {metric!r} required by SLO {slo!r}")
    order = {m.id: i for i, m in enumerate(repo.models)}
    sign = -1.0 if direction == HIGHER_BETTER else 1.0
    ranked = sorted(fitting, key=lambda m: (sign * float(m.repo_metrics[metric]), order[m.id]))
    return [m.id for m in ranked[:k]]


def observe_token(tracker: BreachTracker, breached: bool, cfg: PolicyConfig) -> bool:
    """Count one served token; True (Trigger) when breaches exceed ``cbc_max``."""
    tracker.tokens_in_window += 1
    if breached:
        tracker.cbc += 1
    if tracker.cbc > cfg.cbc_max:
        tracker.reset()
        return TRIGGER
    if tracker.tokens_in_window >= cfg.window:
        tracker.reset()
    return NO_TRIGGER


def should_reassess(served_requests_since_eval: int, cfg: PolicyConfig) -> bool:
    return served_requests_since_eval >= cfg.ri


def _achievable(mem: MemoryConfig, load: LoadState, model: str, depth: int, batch_limit: int) -> int:
    if not fits(mem, load):
        return -1
    b = max_batch_size(mem, load, model, depth)
    return min(b, batch_limit) if batch_limit > 0 else b


def plan_load(load: LoadState, mem: MemoryConfig, model: str, depth: int, *,
              in_flight: int = 0, batch_limit: int = 0,
              keep_first: Sequence[str] = ()) -> tuple[LoadState, int] | None:
    """Smallest eviction that serves ``model`` at ``depth``.

    Starts from a plan holding only ``model`` at ``depth`` and re-admits the
    deeper resident copy of ``model`` and then other resident models (``keep_first``
    order, then by id) as long as the achievable batch does not drop.
    Returns (plan, achievable_batch) or None when even the minimal plan cannot
    host ``max(1, in_flight)`` requests.
    """
    plan = load.only(model, depth)
    best = _achievable(mem, plan, model, depth, batch_limit)
    if best < max(1, in_flight):
        return None
    have = load.depth(model)
    if have > depth:
        p2 = plan.with_depth(model, have)
        if _achievable(mem, p2, model, depth, batch_limit) >= best:
            plan = p2
    others = [m for m in keep_first if m in load.entries and m != model]
    others += [m for m in sorted(load.entries) if m != model and m not in others]
    for m in others:
        p2 = plan.with_depth(m, load.depth(m))
        if _achievable(mem, p2, model, depth, batch_limit) >= best:
            plan = p2
    return plan, best


@dataclass(frozen=True)
class Option:
    action: Action
    model: str
    depth: int
    cost_s: float
    new_bytes: int
    load: LoadState = field(compare=False)
    batch: int = 1


def rank_options(pht: PerformanceHistoryTable, current: tuple[str, int], candidates: Sequence[str],
                 depths: Mapping[str, int], mem: MemoryConfig, load: LoadState, cfg: PolicyConfig, *,
                 in_flight: int = 0, batch_limit: int = 0) -> list[Option]:
    """All feasible options sorted best first.

    cost = load_time(new bytes) / horizon + expected latency at the option's
    depth, divided by the achievable batch under the throughput SLO.  Ties go
    to fewer new bytes, then LoadMore, then candidate order.
    """
    cur, depth = current
    if not pht.has_data(cur):
        raise StalenessError(f"no profile for current model {cur!r}")
    repo = pht.repo
    scored: list[tuple[tuple, Option]] = []

    def consider(action: Action, m: str, d: int, rank: int) -> None:
        planned = plan_load(load, mem, m, d, in_flight=in_flight, batch_limit=batch_limit, keep_first=(cur,))
        if planned is None:
            return
        plan, batch = planned
        nb = load.bytes_to_reach(m, d)
        lt = load_time_s(nb, mem)
        lat = expected_token_latency(pht.profiles[m].exit_hist, repo[m], d)
        cost = (lt / cfg.horizon_tokens if nb else 0.0) + lat
        if cfg.slo == "throughput":
            cost = cost / batch
        if math.isnan(cost):
            cost = math.inf
        kind = 0 if isinstance(action, LoadMore) else 1
        scored.append(((cost, nb, kind, rank), Option(action, m, d, cost, nb, plan, batch)))

    nxt = repo[cur].next_exit(depth)
    if nxt is not None:
        consider(LoadMore(nxt), cur, nxt, -1)
    for rank, m in enumerate(candidates):
        if m == cur:
            continue
        if not pht.has_data(m) or m not in depths:
            raise StalenessError(f"no profile for candidate {m!r}")
        consider(Switch(m, depths[m]), m, depths[m], rank)
    scored.sort(key=lambda kv: kv[0])
    return [o for _, o in scored]


def decide_action(pht: PerformanceHistoryTable, current: tuple[str, int], candidates: Sequence[str],
                  depths: Mapping[str, int], mem: MemoryConfig, load: LoadState, cfg: PolicyConfig, *,
                  in_flight: int = 0, batch_limit: int = 0) -> Action:
    opts = rank_options(pht, current, candidates, depths, mem, load, cfg,
                        in_flight=in_flight, batch_limit=batch_limit)
    return opts[0].action if opts else Stay()


def point_mass(layer: int) -> ExitHistogram:
    return ExitHistogram.point_mass(layer)
