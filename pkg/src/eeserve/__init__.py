"""Trace-driven simulator and policy library for adaptive early-exit LLM serving."""

from __future__ import annotations

from .engine import EventLog, Mode, SimResult, simulate
from .errors import EEServeError
from .memory_model import LoadState, MemoryConfig, kv_bytes_per_request, load_time_s, max_batch_size
from .metrics_io import MetricsReport, aggregate, exit_table, read_report, write_report
from .model_spec import ModelRepository, ModelSpec, load_repository, weights_bytes_at_depth
from .pht import ExitHistogram, PerformanceHistoryTable, best_model, choose_depth, perplexity, record_token
from .policy import (BreachTracker, LoadMore, PolicyConfig, Stay, Switch, decide_action, expected_token_latency,
                     observe_token, select_candidates, should_reassess)
from .trace import (GeneratorConfig, TokenRecord, TraceRequest, earliest_confident_exit, generate_workload,
                    read_workload, write_workload)

__version__ = "0.1.0"
