"""Weights and KV-cache occupancy, batch capacity and load time."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping

from .errors import CapacityError, ConfigError, DomainError
from .model_spec import ModelRepository, ModelSpec, weights_bytes_at_depth


@dataclass(frozen=True)
class MemoryConfig:
    capacity_bytes: int
    reserve_bytes: int = 0
    max_seq_len: int = 2048
    load_bandwidth_bytes_per_s: float = 25e9

    def __post_init__(self) -> None:
        if not self.capacity_bytes > self.reserve_bytes >= 0:
            raise ConfigError("memory: need capacity_bytes > reserve_bytes >= 0")
        if not self.load_bandwidth_bytes_per_s > 0:
            raise ConfigError("memory: load_bandwidth_bytes_per_s must be > 0")
        if self.max_seq_len < 1:
            raise ConfigError("memory: max_seq_len must be >= 1")

    @property
    def usable_bytes(self) -> int:
        return self.capacity_bytes - self.reserve_bytes


@dataclass(frozen=True)
class LoadState:
    """Which models are resident and to what depth.

    Immutable: ``with_depth``/``without`` return new states.
    """

    specs: Mapping[str, ModelSpec]
    entries: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for mid, depth in self.entries.items():
            spec = self.specs[mid]
            if depth not in spec.exit_layers:
                raise DomainError(f"{mid}: loaded depth {depth} is not an exit layer")

    @classmethod
    def empty(cls, repo: ModelRepository) -> "LoadState":
        return cls({m.id: m for m in repo.models}, {})

    @property
    def total_weights_bytes(self) -> int:
        return sum(weights_bytes_at_depth(self.specs[m], d) for m, d in self.entries.items())

    def depth(self, model: str) -> int:
        """Loaded depth, 0 when not resident."""
        return self.entries.get(model, 0)

    def with_depth(self, model: str, depth: int) -> "LoadState":
        e = dict(self.entries)
        e[model] = depth
        return LoadState(self.specs, e)

    def without(self, model: str) -> "LoadState":
        e = {m: d for m, d in self.entries.items() if m != model}
        return LoadState(self.specs, e)

    def only(self, model: str, depth: int) -> "LoadState":
        return LoadState(self.specs, {model: depth})

    def __iter__(self) -> Iterator[tuple[str, int]]:
        return iter(sorted(self.entries.items()))

    def bytes_to_reach(self, model: str, depth: int) -> int:
        """New bytes needed so that ``model`` is resident to at least ``depth``."""
        have = self.depth(model)
        if have >= depth:
            return 0
        spec = self.specs[model]
        if have == 0:
            return weights_bytes_at_depth(spec, depth)
        return (depth - have) * spec.per_layer_weight_bytes


def kv_bytes_per_request(spec: ModelSpec, depth: int, seq_len: int) -> int:
    if not 1 <= depth <= spec.num_layers:
        raise DomainError(f"{spec.id}: depth {depth} outside [1, {spec.num_layers}]")
    if seq_len < 1:
        raise DomainError(f"seq_len must be >= 1, got {seq_len}")
    return depth * seq_len * spec.kv_bytes_per_token_per_layer


def fits(mem: MemoryConfig, load: LoadState) -> bool:
    return load.total_weights_bytes <= mem.usable_bytes


def max_batch_size(mem: MemoryConfig, load: LoadState, serving_model: str, serving_depth: int) -> int:
    """Requests whose worst-case KV fits beside the resident weights."""
    have = load.depth(serving_model)
    if have < serving_depth:
        raise DomainError(f"{serving_model} loaded to {have} layers, cannot serve at {serving_depth}")
    free = mem.usable_bytes - load.total_weights_bytes
    if free < 0:
        raise CapacityError(
            f"weights {load.total_weights_bytes} B exceed usable memory {mem.usable_bytes} B"
        )
    kv = kv_bytes_per_request(load.specs[serving_model], serving_depth, mem.max_seq_len)
    return free // kv


def load_time_s(nbytes: float, mem: MemoryConfig) -> float:
    if nbytes < 0 or math.isnan(nbytes):
        raise DomainError(f"bytes must be >= 0, got {nbytes}")
    return nbytes / mem.load_bandwidth_bytes_per_s


def occupancy_bytes(mem: MemoryConfig, load: LoadState, serving_model: str | None,
                    serving_depth: int, in_flight: int) -> int:
    """Reserve + weights + worst-case KV of the in-flight requests."""
    kv = 0
    if in_flight and serving_model is not None:
        kv = in_flight * kv_bytes_per_request(load.specs[serving_model], serving_depth, mem.max_seq_len)
    return mem.reserve_bytes + load.total_weights_bytes + kv
