"""Regenerate the derived fixture files in this directory.

Run from anywhere: ``python3 fixtures/build_fixtures.py``.  The OPT
calibration repository and generator are hand-written JSON; everything
else here is rebuilt from the constants below.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from eeserve.model_spec import ModelRepository, ModelSpec, save_repository
from eeserve.trace import ExitObservation, ModelTokenRecord, TokenRecord, TraceRequest, write_workload

HERE = Path(__file__).resolve().parent
GB = 10**9

# Two large early-exit models on a 160 GB device.  Full weights are
# 63 GB and 129 GB; the partial plan loads CodeLlama-34B to layer 20
# (26.6 GB) and Llama2-70B to layer 9 (15.4 GB), 42 GB in total.
LARGE = ModelRepository((
    ModelSpec("codellama-34b", 48, tuple(range(4, 49, 4)), 1_300_000_000, 600_000_000, 3416,
              0.0012, 2.0e-5, repo_metrics={"throughput": 30.0}),
    ModelSpec("llama2-70b", 80, (9, 18, 27, 36, 45, 54, 63, 72, 80), 1_600_000_000, 1_000_000_000, 4096,
              0.0016, 2.6e-5, repo_metrics={"throughput": 18.0}),
), {"throughput": "higher_better"})
LARGE_MEMORY = {"capacity_bytes": 160 * GB, "reserve_bytes": 0, "max_seq_len": 2048}
LARGE_PARTIAL = {"codellama-34b": 20, "llama2-70b": 9}

# Batch-size fixture: CodeLlama-34B alone on an 80 GB device with a
# 0.2 GB runtime reserve, full depth vs greedy depth 12.
BATCH_MEMORY = {"capacity_bytes": 80 * GB, "reserve_bytes": 200_000_000, "max_seq_len": 2048}
BATCH_DEPTHS = {"full": 48, "greedy": 12}

# Ten-request evaluation fixture: every token exits at the final layer
# with a constant per-model log-probability.
EVAL_PPL = {"opt-1.3b": 1.47, "opt-6.7b": 1.49}
EVAL_TOKENS = 8


def build_large() -> None:
    save_repository(LARGE, HERE / "large_repository.json")
    (HERE / "large_memory.json").write_text(json.dumps(
        {"memory": LARGE_MEMORY, "partial_depths": LARGE_PARTIAL}, indent=2) + "\n")
    batch = ModelRepository((LARGE["codellama-34b"],), {"throughput": "higher_better"})
    save_repository(batch, HERE / "codellama_repository.json")
    (HERE / "codellama_batch.json").write_text(json.dumps(
        {"memory": BATCH_MEMORY, "depths": BATCH_DEPTHS}, indent=2) + "\n")


def build_eval_trace() -> None:
    layers = {"opt-1.3b": (6, 12, 24), "opt-6.7b": (9, 17, 32)}
    reqs = []
    tok = 100
    for rid in range(10):
        toks = []
        for _ in range(EVAL_TOKENS):
            pm = {}
            for m, ls in layers.items():
                lp = -math.log(EVAL_PPL[m])
                # the final-layer confidence equals exp(logprob), below th=0.7
                obs = tuple(ExitObservation(l, tok, math.exp(lp) if l == ls[-1] else 0.3, lp) for l in ls)
                pm[m] = ModelTokenRecord(tok, obs)
            toks.append(TokenRecord(pm))
            tok += 1
        reqs.append(TraceRequest.from_tokens(rid, 0.0, 128, toks))
    write_workload(reqs, HERE / "table1_trace.jsonl")


def build_three_requests() -> None:
    """A short three-request trace in the documented JSONL format."""
    import dataclasses

    from eeserve.model_spec import load_repository
    from eeserve.trace import IntLaw, load_generator_config
    from eeserve.trace import generate_workload

    repo = load_repository(HERE / "opt_repository.json")
    gen = dataclasses.replace(load_generator_config(HERE / "opt_generator.json"), num_requests=3, seed=7,
                              tokens_per_request_law=IntLaw("constant", 4, 4), schedule=None, classes={})
    write_workload(generate_workload(gen, repo), HERE / "three_requests.jsonl")


if __name__ == "__main__":
    build_large()
    build_eval_trace()
    build_three_requests()
