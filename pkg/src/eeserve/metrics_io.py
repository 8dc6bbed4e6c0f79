"""Figures of merit derived from event logs, and report/log serialization."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import FormatError, IntegrityError, UsageError

CSV_HEADER = ("request_id", "ttft_s", "tpot_mean_s", "latency_s", "tokens")
SUMMARY_FIELDS = ("throughput_tok_s", "mean_ttft_s", "mean_tpot_s", "perplexity", "energy_mwh_per_prompt",
                  "achieved_batch_size", "unchanged_fraction")


@dataclass(frozen=True)
class RequestMetrics:
    request_id: int
    ttft_s: float
    tpot_mean_s: float
    latency_s: float
    tokens: int


@dataclass
class MetricsReport:
    mode: str = ""
    requests: list[RequestMetrics] = field(default_factory=list)
    throughput_tok_s: float = 0.0
    mean_ttft_s: float = 0.0
    mean_tpot_s: float = 0.0
    perplexity: float | None = None
    energy_mwh_per_prompt: float = 0.0
    achieved_batch_size: float = 0.0
    unchanged_fraction: float = 0.0
    total_tokens: int = 0
    decode_time_s: float = 0.0
    exit_table: dict[str, dict[int, float]] = field(default_factory=dict)
    action_counts: dict[str, int] = field(default_factory=lambda: {"ld": 0, "sw": 0})
    memory_timeline: list[tuple[float, int]] = field(default_factory=list)

    def summary_line(self) -> str:
        ppl = f"{self.perplexity:.4f}" if self.perplexity is not None else "n/a"
        return (f"mode={self.mode} throughput={self.throughput_tok_s:.2f} tok/s ttft={self.mean_ttft_s * 1e3:.2f} ms "
                f"tpot={self.mean_tpot_s * 1e3:.3f} ms perplexity={ppl} batch={self.achieved_batch_size:.2f} "
                f"ld={self.action_counts.get('ld', 0)} sw={self.action_counts.get('sw', 0)}")

    def full_depth_mass(self, num_layers: Mapping[str, int]) -> float:
        return sum(p for m, row in self.exit_table.items() for l, p in row.items() if l == num_layers.get(m))

    def to_obj(self) -> dict[str, Any]:
        d = asdict(self)
        d["exit_table"] = {m: {str(l): p for l, p in row.items()} for m, row in self.exit_table.items()}
        d["memory_timeline"] = [list(x) for x in self.memory_timeline]
        return d

    @classmethod
    def from_obj(cls, d: Mapping[str, Any]) -> "MetricsReport":
        d = dict(d)
        d["requests"] = [RequestMetrics(**r) for r in d.get("requests", [])]
        d["exit_table"] = {m: {int(l): float(p) for l, p in row.items()} for m, row in d.get("exit_table", {}).items()}
        d["memory_timeline"] = [(float(t), int(b)) for t, b in d.get("memory_timeline", [])]
        return cls(**d)


def _finish(mode: str, requests: list[RequestMetrics], n_tokens: int, decode_s: float, neg_lp: float,
            energy: float, steps: int, n_unchanged: int, counts: Mapping[tuple[str, int], int],
            actions: Mapping[str, int], timeline: list[tuple[float, int]]) -> MetricsReport:
    n = len(requests)
    table: dict[str, dict[int, float]] = {}
    for (m, l) in sorted(counts):
        table.setdefault(m, {})[l] = 100.0 * counts[(m, l)] / n_tokens
    return MetricsReport(
        mode=mode,
        requests=requests,
        throughput_tok_s=n_tokens / decode_s if decode_s > 0 else 0.0,
        mean_ttft_s=sum(r.ttft_s for r in requests) / n if n else 0.0,
        mean_tpot_s=sum(r.tpot_mean_s for r in requests) / n if n else 0.0,
        perplexity=math.exp(neg_lp / n_tokens) if n_tokens else None,
        energy_mwh_per_prompt=energy / n if n else 0.0,
        achieved_batch_size=n_tokens / steps if steps else 0.0,
        unchanged_fraction=n_unchanged / n_tokens if n_tokens else 0.0,
        total_tokens=n_tokens,
        decode_time_s=decode_s,
        exit_table=table,
        action_counts={"ld": int(actions.get("ld", 0)), "sw": int(actions.get("sw", 0))},
        memory_timeline=list(timeline),
    )


def report_from_inline(sim: Any, mode: str) -> MetricsReport:
    """Report from the simulator's running counters (no log traversal)."""
    reqs = [RequestMetrics(*c) for c in sim.completed]
    return _finish(mode, reqs, sim.n_tokens, sim.decode_s, sim.neg_lp, sim.energy_tok + sim.energy_load,
                   sim.step, sim.n_unchanged, sim.exit_counts, sim.actions, sim.timeline)


def _raw_events(log: Any) -> Iterable[tuple[float, str, Any]]:
    """Normalize an EventLog or an iterable of event dicts to (t, kind, payload)."""
    from .engine import TOKEN_FIELDS, EventLog

    if isinstance(log, EventLog):
        for _, t, kind, p in log.iter_raw():
            if kind == "TokenEmitted":
                yield t, kind, p[2:]
            else:
                yield t, kind, p
        return
    for e in log:
        kind = e.get("kind")
        t = e.get("t_s")
        if kind is None or t is None:
            raise IntegrityError(f"event without t_s/kind: {e}")
        if kind == "TokenEmitted":
            yield t, kind, tuple(e[f] for f in TOKEN_FIELDS)
        else:
            yield t, kind, e


def aggregate(log: Any) -> MetricsReport:
    """Rebuild the metrics report from events alone."""
    mode = ""
    start: dict[int, float] = {}
    pf_end: dict[int, float] = {}
    last_t: dict[int, float] = {}
    ntok: dict[int, int] = {}
    requests: list[RequestMetrics] = []
    n_tokens = 0
    decode_s = 0.0
    neg_lp = 0.0
    energy_tok = 0.0
    energy_load = 0.0
    n_unchanged = 0
    last_step = None
    steps = 0
    counts: dict[tuple[str, int], int] = {}
    actions = {"ld": 0, "sw": 0}
    timeline: list[tuple[float, int]] = []
    prev_t = -math.inf
    for t, kind, p in _raw_events(log):
        if t < prev_t:
            raise IntegrityError(f"event {kind} at t={t} precedes previous event at t={prev_t}")
        prev_t = t
        if kind == "TokenEmitted":
            rid, model, layer, breached, unchanged, lp, energy, step, step_s = p
            if rid not in pf_end:
                raise IntegrityError(f"token for request {rid} before its prefill")
            if step != last_step:
                decode_s += step_s
                steps += 1
                last_step = step
            n_tokens += 1
            neg_lp += -lp
            energy_tok += energy
            n_unchanged += unchanged
            counts[(model, layer)] = counts.get((model, layer), 0) + 1
            last_t[rid] = t
            ntok[rid] = ntok.get(rid, 0) + 1
        elif kind == "RequestStart":
            start[p["request"]] = t
        elif kind == "Prefill":
            rid = p["request"]
            if rid not in start:
                raise IntegrityError(f"prefill for request {rid} before it started")
            if rid not in pf_end:
                pf_end[rid] = t
        elif kind == "RequestComplete":
            rid = p["request"]
            if rid not in ntok:
                raise IntegrityError(f"request {rid} completed without tokens")
            n = ntok[rid]
            rm = RequestMetrics(rid, pf_end[rid] - start[rid], (last_t[rid] - pf_end[rid]) / n,
                                last_t[rid] - start[rid], n)
            if (rm.ttft_s, rm.tpot_mean_s, rm.latency_s, rm.tokens) != (p["ttft_s"], p["tpot_mean_s"],
                                                                        p["latency_s"], p["tokens"]):
                raise IntegrityError(f"request {rid}: RequestComplete payload disagrees with its events")
            requests.append(rm)
        elif kind == "WeightsLoad":
            energy_load += p.get("energy_mwh", 0.0)
        elif kind == "Action":
            if p["action"] in actions:
                actions[p["action"]] += 1
        elif kind == "MemorySample":
            timeline.append((t, p["bytes"]))
        elif kind == "RunStart":
            mode = p.get("mode", "")
    return _finish(mode, requests, n_tokens, decode_s, neg_lp, energy_tok + energy_load, steps, n_unchanged,
                   counts, actions, timeline)


def exit_table(log: Any) -> dict[str, dict[int, float]]:
    """Percentage of tokens that left at each (model, layer)."""
    counts: dict[tuple[str, int], int] = {}
    total = 0
    for _, kind, p in _raw_events(log):
        if kind == "TokenEmitted":
            key = (p[1], p[2])
            counts[key] = counts.get(key, 0) + 1
            total += 1
    out: dict[str, dict[int, float]] = {}
    for (m, l) in sorted(counts):
        out.setdefault(m, {})[l] = 100.0 * counts[(m, l)] / total
    return out


# ------------------------------------------------------------------------ I/O

def _open_for_write(path: str | Path):
    try:
        return open(path, "w", newline="")
    except OSError as e:
        raise FormatError(f"cannot write: {e.strerror}", str(path)) from e


def write_report(report: MetricsReport, path: str | Path, format: str = "json") -> None:
    if format not in ("json", "csv"):
        raise UsageError(f"unknown report format {format!r}; expected json or csv")
    with _open_for_write(path) as f:
        if format == "json":
            json.dump(report.to_obj(), f, indent=1)
            f.write("\n")
            return
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in report.requests:
            w.writerow([r.request_id, repr(r.ttft_s), repr(r.tpot_mean_s), repr(r.latency_s), r.tokens])
        w.writerow([])
        w.writerow(["# summary", "value"])
        w.writerow(["mode", report.mode])
        for k in SUMMARY_FIELDS:
            v = getattr(report, k)
            w.writerow([k, "" if v is None else repr(v)])
        w.writerow(["total_tokens", report.total_tokens])
        w.writerow(["decode_time_s", repr(report.decode_time_s)])
        w.writerow(["ld", report.action_counts.get("ld", 0)])
        w.writerow(["sw", report.action_counts.get("sw", 0)])
        for m, row in report.exit_table.items():
            for l, p in row.items():
                w.writerow([f"exit:{m}:{l}", repr(p)])


def read_report(path: str | Path) -> MetricsReport:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise FormatError(f"cannot read report: {e.strerror}", str(path)) from e
    if path.suffix == ".csv":
        return _read_csv_report(text, str(path))
    try:
        return MetricsReport.from_obj(json.loads(text))
    except json.JSONDecodeError as e:
        raise FormatError(e.msg, str(path), e.lineno) from e


def _read_csv_report(text: str, where: str) -> MetricsReport:
    rows = list(csv.reader(text.splitlines()))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise FormatError("bad CSV header", where, 1)
    rep = MetricsReport()
    i = 1
    while i < len(rows) and rows[i]:
        r = rows[i]
        rep.requests.append(RequestMetrics(int(r[0]), float(r[1]), float(r[2]), float(r[3]), int(r[4])))
        i += 1
    for r in rows[i + 2:]:
        k, v = r[0], r[1]
        if k == "mode":
            rep.mode = v
        elif k in SUMMARY_FIELDS:
            setattr(rep, k, float(v) if v != "" else None)
        elif k == "total_tokens":
            rep.total_tokens = int(v)
        elif k == "decode_time_s":
            rep.decode_time_s = float(v)
        elif k in ("ld", "sw"):
            rep.action_counts[k] = int(v)
        elif k.startswith("exit:"):
            _, m, l = k.rsplit(":", 2) if k.count(":") >= 2 else (k, "", "0")
            rep.exit_table.setdefault(m, {})[int(l)] = float(v)
    return rep


def write_event_log(log: Any, path: str | Path) -> None:
    with _open_for_write(path) as f:
        for e in log:
            f.write(json.dumps(e, separators=(",", ":")))
            f.write("\n")


def read_event_log(path: str | Path) -> Any:
    from .engine import EventLog

    events = []
    try:
        fh = open(path)
    except OSError as e:
        raise FormatError(f"cannot read event log: {e.strerror}", str(path)) from e
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise FormatError(e.msg, str(path), lineno) from e
    try:
        return EventLog.from_dicts(events)
    except KeyError as e:
        raise IntegrityError(f"{path}: event missing field {e}") from None


def write_memory_timeline(report: MetricsReport, path: str | Path) -> None:
    with _open_for_write(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t_s", "bytes"])
        for t, b in report.memory_timeline:
            w.writerow([repr(t), b])
