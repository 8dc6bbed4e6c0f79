"""Discrete-event serving simulator for vanilla, single-model early-exit and HELIOS modes.

Time advances only through explicit durations (weight loads, prefills and
decode steps), so a run is a deterministic function of its inputs.  Every
state change is written to an ``EventLog``; ``metrics_io.aggregate`` can
rebuild the whole report from that log alone.

Decode semantics: a step serves every in-flight request at one exit layer,
the deepest of the per-request ``min(earliest confident exit, serving depth)``.
At batch 1 this is the token's own exit capped at the loaded depth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

from .errors import CapacityError, ConfigError, ValidationError
from .memory_model import LoadState, MemoryConfig, fits, load_time_s, max_batch_size, occupancy_bytes
from .model_spec import ModelRepository
from .pht import PerformanceHistoryTable, best_model, choose_depth, record_request, record_token
from .policy import (BreachTracker, LoadMore, Option, PolicyConfig, Switch, observe_token, rank_options,
                     select_candidates, should_reassess)
from .trace import TraceRequest

log = logging.getLogger(__name__)

MODES = ("vanilla", "ee_single", "helios")

TOKEN_FIELDS = ("request", "model", "exit_layer", "breached", "unchanged", "logprob", "energy_mwh", "step", "step_s")


@dataclass(frozen=True)
class Mode:
    name: str
    model: str | None = None

    @classmethod
    def parse(cls, s: "str | Mode", model: str | None = None) -> "Mode":
        if isinstance(s, Mode):
            return s
        name, _, m = s.partition(":")
        if name not in MODES:
            raise ConfigError(f"unknown mode {s!r}; expected one of {list(MODES)} (optionally name:model)")
        return cls(name, m or model)

    def __str__(self) -> str:
        return f"{self.name}:{self.model}" if self.model and self.name != "helios" else self.name


class EventLog:
    """Time-ordered events; token events are stored compactly as tuples."""

    def __init__(self) -> None:
        self.events: list[tuple[int, float, str, dict[str, Any]]] = []
        self.tokens: list[tuple] = []  # (seq, t_s, *TOKEN_FIELDS)
        self._seq = 0

    def add(self, t_s: float, kind: str, **payload: Any) -> None:
        self.events.append((self._seq, t_s, kind, payload))
        self._seq += 1

    def token(self, t_s: float, request: int, model: str, exit_layer: int, breached: bool, unchanged: bool,
              logprob: float, energy_mwh: float, step: int, step_s: float) -> None:
        self.tokens.append((self._seq, t_s, request, model, exit_layer, breached, unchanged, logprob,
                            energy_mwh, step, step_s))
        self._seq += 1

    def __len__(self) -> int:
        return self._seq

    def iter_raw(self) -> Iterator[tuple[int, float, str, Any]]:
        """(seq, t_s, kind, payload-or-token-tuple) in sequence order."""
        ev, tk = self.events, self.tokens
        i = j = 0
        while i < len(ev) or j < len(tk):
            if j >= len(tk) or (i < len(ev) and ev[i][0] < tk[j][0]):
                yield ev[i]
                i += 1
            else:
                t = tk[j]
                yield (t[0], t[1], "TokenEmitted", t)
                j += 1

    def __iter__(self) -> Iterator[dict[str, Any]]:
        for seq, t, kind, p in self.iter_raw():
            if kind == "TokenEmitted":
                d = {"t_s": t, "kind": kind}
                d.update(zip(TOKEN_FIELDS, p[2:]))
                yield d
            else:
                d = {"t_s": t, "kind": kind}
                d.update(p)
                yield d

    @classmethod
    def from_dicts(cls, events: Sequence[dict[str, Any]]) -> "EventLog":
        out = cls()
        for e in events:
            e = dict(e)
            t = e.pop("t_s")
            kind = e.pop("kind")
            if kind == "TokenEmitted":
                out.token(t, *(e[f] for f in TOKEN_FIELDS))
            else:
                out.add(t, kind, **e)
        return out


@dataclass
class _Req:
    req: TraceRequest
    model: str
    start: float
    eidx: list[int]
    conf: list[list[float]]
    tok: list[list[int]]
    fin: list[int]
    lps: list[list[float]]
    pos: int = 0
    pf_end: float | None = None
    last_t: float = 0.0
    evaluating: bool = False


@dataclass
class SimResult:
    log: EventLog
    report: Any  # metrics_io.MetricsReport
    phts: list[dict[str, Any]] = field(default_factory=list)


class _Simulator:
    def __init__(self, repo: ModelRepository, workload: Sequence[TraceRequest], mem: MemoryConfig,
                 cfg: PolicyConfig, mode: Mode, batch_limit: int, load_power_mw: float):
        self.repo = repo
        self.work = list(workload)
        self.mem = mem
        self.cfg = cfg
        self.mode = mode
        self.batch_limit = batch_limit
        self.load_power_mw = load_power_mw
        self.log = EventLog()
        self.clock = 0.0
        self.load = LoadState.empty(repo)
        self.cursor = 0
        self.batch: list[_Req] = []
        self.step = 0
        self.serving: tuple[str, int] | None = None
        self.tracker = BreachTracker()
        self.trigger_pending = False
        self.phts: list[dict[str, Any]] = []
        # inline aggregates
        self.n_tokens = 0
        self.decode_s = 0.0
        self.neg_lp = 0.0
        self.energy_tok = 0.0
        self.energy_load = 0.0
        self.n_unchanged = 0
        self.exit_counts: dict[tuple[str, int], int] = {}
        self.completed: list[tuple[int, float, float, float, int]] = []
        self.actions = {"ld": 0, "sw": 0}
        self.timeline: list[tuple[float, int]] = []

    # ----------------------------------------------------------- bookkeeping
    def _sample_memory(self) -> None:
        m, d = self.serving if self.serving else (None, 0)
        b = occupancy_bytes(self.mem, self.load, m, d, len(self.batch))
        if b > self.mem.capacity_bytes:
            raise CapacityError(f"occupancy {b} B exceeds capacity {self.mem.capacity_bytes} B at t={self.clock}")
        self.log.add(self.clock, "MemorySample", bytes=b)
        self.timeline.append((self.clock, b))

    def _apply_plan(self, plan: LoadState) -> None:
        """Evict/truncate first, then load what is missing."""
        if not fits(self.mem, plan):
            raise CapacityError(f"load plan {dict(plan.entries)} exceeds usable memory")
        changed = False
        for m, have in sorted(self.load.entries.items()):
            want = plan.depth(m)
            if want < have:
                freed = self.load.total_weights_bytes
                self.load = self.load.with_depth(m, want) if want else self.load.without(m)
                freed -= self.load.total_weights_bytes
                self.log.add(self.clock, "WeightsEvict", model=m, from_depth=have, to_depth=want, bytes=freed)
                changed = True
        for m, want in sorted(plan.entries.items()):
            have = self.load.depth(m)
            if want > have:
                nb = self.load.bytes_to_reach(m, want)
                dur = load_time_s(nb, self.mem)
                self.load = self.load.with_depth(m, want)
                self.clock += dur
                e = self.load_power_mw * dur / 3600.0
                self.energy_load += e
                self.log.add(self.clock, "WeightsLoad", model=m, from_depth=have, to_depth=want, bytes=nb,
                             duration_s=dur, energy_mwh=e)
                changed = True
        if changed:
            self._sample_memory()

    def _make_req(self, req: TraceRequest, model: str, evaluating: bool) -> _Req:
        if model not in req.per_model:
            raise ValidationError(f"request {req.request_id} has no observations for model {model!r}")
        mt = req.per_model[model]
        if tuple(mt.layers) != self.repo[model].exit_layers:
            raise ValidationError(f"request {req.request_id}: {model} layers {mt.layers} do not match repository")
        if self.mode.name == "vanilla":
            eidx = [len(mt.layers) - 1] * mt.n_tokens
        else:
            eidx = mt.earliest_exit_index(self.cfg.th).tolist()
        return _Req(req, model, self.clock, eidx, mt.confidence.tolist(), mt.token_id.tolist(),
                    mt.final_token_id.tolist(), mt.logprob.tolist(), evaluating=evaluating)

    def _admit(self, req: TraceRequest, model: str, depth: int, evaluating: bool = False) -> _Req:
        if req.arrival_time_s > self.clock:
            self.clock = req.arrival_time_s
        r = self._make_req(req, model, evaluating)
        self.log.add(self.clock, "RequestStart", request=req.request_id, model=model, depth=depth)
        self.batch.append(r)
        self.cursor += 1
        return r

    def _prefill(self, reqs: Sequence[_Req], model: str, depth: int, reprefill: bool) -> None:
        spec = self.repo[model]
        for r in reqs:
            dur = r.req.prompt_len * depth * spec.t_prefill_per_layer_per_token_s
            self.clock += dur
            self.log.add(self.clock, "Prefill", request=r.req.request_id, model=model, depth=depth,
                         duration_s=dur, reprefill=reprefill)
            if r.pf_end is None:
                r.pf_end = self.clock
                r.last_t = self.clock

    def _decode_step(self, model: str, depth: int) -> None:
        spec = self.repo[model]
        di = spec.exit_index(depth)
        x = max(min(r.eidx[r.pos], di) for r in self.batch)
        layer = spec.exit_layers[x]
        dur = layer * spec.t_decode_per_layer_s
        self.clock += dur
        self.step += 1
        self.decode_s += dur
        th = self.cfg.th
        energy = layer * spec.energy_per_layer_per_token_mwh
        vanilla = self.mode.name == "vanilla"
        helios_serving = self.mode.name == "helios"
        key = (model, layer)
        for r in self.batch:
            i = r.pos
            conf = r.conf[i][x]
            breached = False if vanilla else conf < th
            unchanged = r.tok[i][x] == r.fin[i]
            lp = r.lps[i][x]
            self.log.token(self.clock, r.req.request_id, model, layer, breached, unchanged, lp, energy,
                           self.step, dur)
            self.n_tokens += 1
            self.neg_lp += -lp
            self.energy_tok += energy
            self.n_unchanged += unchanged
            self.exit_counts[key] = self.exit_counts.get(key, 0) + 1
            r.pos += 1
            r.last_t = self.clock
            if r.evaluating:
                record_token(self._pht, model, layer, lp, dur)
            elif helios_serving:
                if observe_token(self.tracker, breached, self.cfg):
                    if not self.trigger_pending:
                        self.log.add(self.clock, "BreachTrigger", model=model, depth=depth)
                    self.trigger_pending = True

    def _complete_finished(self) -> list[_Req]:
        done = [r for r in self.batch if r.pos >= len(r.eidx)]
        if not done:
            return done
        self.batch = [r for r in self.batch if r.pos < len(r.eidx)]
        for r in done:
            n = len(r.eidx)
            ttft = r.pf_end - r.start
            tpot = (r.last_t - r.pf_end) / n
            lat = r.last_t - r.start
            self.log.add(self.clock, "RequestComplete", request=r.req.request_id, ttft_s=ttft,
                         tpot_mean_s=tpot, latency_s=lat, tokens=n)
            self.completed.append((r.req.request_id, ttft, tpot, lat, n))
            if r.evaluating:
                record_request(self._pht, r.model, ttft, r.req.prompt_len)
        self._sample_memory()
        return done

    # ---------------------------------------------------------------- modes
    def _single_model(self) -> str:
        m = self.mode.model or self.repo.models[0].id
        if m not in self.repo:
            raise ConfigError(f"mode {self.mode}: model {m!r} not in repository")
        return m

    def run_ee_single(self) -> None:
        m = self._single_model()
        L = self.repo[m].num_layers
        self.log.add(self.clock, "RunStart", mode=str(self.mode), model=m)
        self._serve(m, L, 1, self.load.with_depth(m, L), None)

    def run_vanilla(self) -> None:
        m = self._single_model()
        L = self.repo[m].num_layers
        self.log.add(self.clock, "RunStart", mode=str(self.mode), model=m)
        plan = self.load.with_depth(m, L)
        if not fits(self.mem, plan):
            raise CapacityError(f"{m} does not fit in device memory")
        cap = max_batch_size(self.mem, plan, m, L)
        if self.batch_limit > 0:
            cap = min(cap, self.batch_limit)
        if cap < 1:
            raise CapacityError(f"{m}: no room for a single request's KV cache")
        self._serve(m, L, cap, plan, None)

    def _serve(self, model: str, depth: int, cap: int, plan: LoadState | None, limit: int | None,
               evaluating: bool = False) -> int:
        """Closed-loop serving until ``limit`` admissions or the workload ends.

        At every request boundary: a pending policy action is decided, new
        requests are admitted (their TTFT therefore includes any weight load
        that follows), the plan is applied, in-flight requests are re-prefilled
        and new ones prefilled.  Returns the number of admitted requests.
        """
        admitted = 0
        policy = self.mode.name == "helios" and not evaluating
        while True:
            more = self.cursor < len(self.work) and (limit is None or admitted < limit)
            action: Option | None = None
            if policy and self.trigger_pending:
                self.trigger_pending = False
                if self.batch or more:
                    action = self._decide(len(self.batch))
                    if action is not None:
                        self._record_action(action, model)
                        plan = action.load
                        prev_depth = depth
                        model_changed = action.model != model
                        model, depth, cap = action.model, action.depth, action.batch
            old = list(self.batch)
            new: list[_Req] = []
            while (more and len(self.batch) < cap
                   and (not self.batch or self.work[self.cursor].arrival_time_s <= self.clock)):
                new.append(self._admit(self.work[self.cursor], model, depth, evaluating))
                admitted += 1
                more = self.cursor < len(self.work) and (limit is None or admitted < limit)
            self.serving = (model, depth)
            if plan is not None:
                self._apply_plan(plan)
                plan = None
            if action is not None and old:
                if model_changed:
                    for r in old:
                        self._rebind(r, model)
                    self._prefill(old, model, depth, True)
                else:
                    self._prefill(old, model, depth - prev_depth, True)
            if new:
                self._sample_memory()
                self._prefill(new, model, depth, False)
            if not self.batch:
                return admitted
            while True:
                self._decode_step(model, depth)
                if self._complete_finished():
                    break

    def _rebind(self, r: _Req, model: str) -> None:
        fresh = self._make_req(r.req, model, r.evaluating)
        r.model, r.eidx, r.conf, r.tok, r.fin, r.lps = model, fresh.eidx, fresh.conf, fresh.tok, fresh.fin, fresh.lps

    # --------------------------------------------------------------- HELIOS
    def _decide(self, in_flight: int) -> Option | None:
        cur = self.serving
        assert cur is not None
        opts = rank_options(self._pht, cur, self.candidates, self.depths, self.mem, self.load, self.cfg,
                            in_flight=in_flight, batch_limit=self.batch_limit)
        self.tracker.reset()
        if not opts:
            self.log.add(self.clock, "Action", action="stay", model=cur[0], depth=cur[1], cost_s=0.0)
            return None
        return opts[0]

    def _record_action(self, opt: Option, model: str) -> None:
        kind = "ld" if isinstance(opt.action, LoadMore) else "sw"
        self.actions[kind] += 1
        self.log.add(self.clock, "Action", action=kind, model=opt.model, depth=opt.depth, cost_s=opt.cost_s)
        if isinstance(opt.action, Switch):
            self.log.add(self.clock, "ModelSwitch", **{"from": model, "to": opt.model, "depth": opt.depth})

    def run_helios(self) -> None:
        cfg = self.cfg
        self.candidates = select_candidates(self.repo, cfg.slo, self.mem, cfg.k)
        self.log.add(self.clock, "RunStart", mode="helios", candidates=list(self.candidates))
        first = True
        while self.cursor < len(self.work):
            if not first:
                self.log.add(self.clock, "ReassessStart")
            self._evaluate()
            if not first:
                self.log.add(self.clock, "ReassessEnd")
            first = False
            if self.cursor >= len(self.work):
                break
            chosen = self.chosen
            d = self.depths[chosen]
            # greedy plan: the chosen model alone, truncated to its covering depth
            plan = self.load.only(chosen, d)
            if not fits(self.mem, plan):
                raise CapacityError(f"greedy plan {chosen}@{d} exceeds device memory")
            cap = max_batch_size(self.mem, plan, chosen, d)
            if self.batch_limit > 0:
                cap = min(cap, self.batch_limit)
            if cap < 1:
                raise CapacityError(f"greedy plan {chosen}@{d} leaves no room for one request")
            self.tracker.reset()
            self.trigger_pending = False
            served = self._serve(chosen, d, cap, plan, cfg.ri)
            assert should_reassess(served, cfg) or self.cursor >= len(self.work)

    def _evaluate(self) -> None:
        cfg = self.cfg
        self._pht = PerformanceHistoryTable(self.repo, self.candidates)
        self.log.add(self.clock, "EvalPhaseStart", candidates=list(self.candidates))
        for c in self.candidates:
            L = self.repo[c].num_layers
            remaining = len(self.work) - self.cursor
            if remaining == 0:
                break
            n = min(cfg.n_eval_requests, remaining)
            if n < cfg.n_eval_requests:
                log.warning("evaluation of %s truncated to %d requests (workload exhausted)", c, n)
            plan = self.load.with_depth(c, L)
            for m in sorted(self.load.entries):
                if fits(self.mem, plan) and max_batch_size(self.mem, plan, c, L) >= 1:
                    break
                if m != c:
                    plan = plan.without(m)
            if not fits(self.mem, plan) or max_batch_size(self.mem, plan, c, L) < 1:
                raise CapacityError(f"candidate {c} cannot be evaluated at full depth")
            self._serve(c, L, 1, plan, n, evaluating=True)
        evaluated = [c for c in self.candidates if self._pht.has_data(c)]
        self.depths = {c: choose_depth(self._pht.profiles[c].exit_hist, self.repo[c].exit_layers,
                                       cfg.coverage_target) for c in evaluated}
        self.chosen = best_model(self._pht, cfg.slo, self.depths, evaluated) if evaluated else None
        snap = self._pht.to_obj()
        self.phts.append(snap)
        self.log.add(self.clock, "EvalPhaseEnd", depths=dict(self.depths), chosen=self.chosen, pht=snap)


def simulate(repo: ModelRepository, workload: Sequence[TraceRequest], mem: MemoryConfig,
             policy_cfg: PolicyConfig | None = None, mode: "str | Mode" = "helios", seed: int = 0, *,
             batch_limit: int = 1, load_power_mw: float = 0.0) -> SimResult:
    """Serve ``workload`` and return the event log and metrics.

    ``batch_limit`` caps the decode batch (0 means memory-bound).  ``seed`` is
    accepted for interface stability; the simulator itself draws no random
    numbers.
    """
    from .metrics_io import report_from_inline

    cfg = policy_cfg or PolicyConfig()
    md = Mode.parse(mode)
    if batch_limit < 0:
        raise ConfigError("batch_limit must be >= 0")
    sim = _Simulator(repo, workload, mem, cfg, md, batch_limit, load_power_mw)
    if workload:
        if md.name == "helios":
            sim.run_helios()
        elif md.name == "ee_single":
            sim.run_ee_single()
        else:
            sim.run_vanilla()
    return SimResult(sim.log, report_from_inline(sim, str(md)), sim.phts)
