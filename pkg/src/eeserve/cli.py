"""Command-line entry points: run, gen-trace, sweep, report.

Exit status is 0 on success, 1 on runtime errors and 2 on usage or
configuration errors.  Any config field can be overridden with a dotted
flag such as ``--policy.th 0.8`` or ``--memory.capacity_bytes=4e10``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

from .engine import Mode, simulate
from .errors import ConfigError, EEServeError, FormatError, UsageError, ValidationError
from .memory_model import MemoryConfig
from .metrics_io import aggregate, read_event_log, write_event_log, write_memory_timeline, write_report
from .model_spec import ModelRepository, load_repository
from .policy import PolicyConfig
from .trace import (GeneratorConfig, TraceRequest, generate_workload, load_generator_config, read_workload,
                    workload_summary, write_workload)

log = logging.getLogger("eeserve")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
RESOLVED_NAME = "resolved_config.json"
PKG_PREFIX = "pkg:"
SWEEP_HEADER = ("value", "mode", "throughput", "ttft", "tpot", "perplexity", "error")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
_USAGE_ERRORS = (UsageError, ConfigError, FormatError, ValidationError)


def data_path(name: str) -> Path:
    """Location of a calibration file shipped with the package."""
    return Path(str(resources.files("eeserve") / "data" / name))


def _resolve_path(p: str, base: Path) -> str:
    if p.startswith(PKG_PREFIX):
        return str(data_path(p[len(PKG_PREFIX):]))
    q = Path(p).expanduser()
    return str(q if q.is_absolute() else (base / q).resolve())


@dataclass
class ExperimentConfig:
    repository: str = PKG_PREFIX + "opt_repository.json"
    workload: dict[str, Any] = field(default_factory=lambda: {"generator": PKG_PREFIX + "opt_generator.json"})
    memory: dict[str, Any] = field(default_factory=dict)
    policy: dict[str, Any] = field(default_factory=dict)
    engine: dict[str, Any] = field(default_factory=dict)
    mode: str = "helios"
    model: str | None = None
    seed: int | None = None
    output_dir: str = "eeserve_out"
    plots: bool = True

    @classmethod
    def from_obj(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("experiment config must be a JSON object")
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"unknown config key(s) {extra}; expected {sorted(known)}")
        return cls(**copy.deepcopy(dict(d)))

    def to_obj(self) -> dict[str, Any]:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}


def memory_config(d: Mapping[str, Any]) -> MemoryConfig:
    try:
        return MemoryConfig(**dict({"capacity_bytes": 40e9, "load_bandwidth_bytes_per_s": 10e9}, **d))
    except TypeError as e:
        raise ConfigError(f"memory: {e}") from None


def policy_config(d: Mapping[str, Any]) -> PolicyConfig:
    try:
        return PolicyConfig(**d)
    except TypeError as e:
        raise ConfigError(f"policy: {e}") from None


def engine_options(d: Mapping[str, Any]) -> dict[str, Any]:
    out = {"batch_limit": 1, "load_power_mw": 0.0}
    extra = set(d) - set(out)
    if extra:
        raise ConfigError(f"engine: unknown key(s) {sorted(extra)}")
    out.update(d)
    return out


def resolve(cfg: ExperimentConfig, base: Path) -> ExperimentConfig:
    """Materialize every default and make paths absolute."""
    r = ExperimentConfig.from_obj(cfg.to_obj())
    r.repository = _resolve_path(r.repository, base)
    wl = dict(r.workload)
    if ("path" in wl) == ("generator" in wl):
        raise ConfigError('workload: give exactly one of "path" or "generator"')
    if "path" in wl:
        wl["path"] = _resolve_path(str(wl["path"]), base)
        wl.setdefault("allow_missing", False)
    elif isinstance(wl["generator"], str):
        wl["generator"] = _resolve_path(wl["generator"], base)
    r.workload = wl
    mem = memory_config(r.memory)
    r.memory = {f.name: getattr(mem, f.name) for f in fields(mem)}
    r.policy = policy_config(r.policy).to_obj()
    r.engine = engine_options(r.engine)
    md = Mode.parse(r.mode, r.model)
    r.mode, r.model = md.name, md.model
    r.output_dir = _resolve_path(r.output_dir, Path.cwd())
    return r


def _parse_value(s: str) -> Any:
    try:
        return json.loads(s)
    except json.JSONDecodeError:
        return s


def split_overrides(extra: Sequence[str]) -> list[tuple[str, Any]]:
    """Turn leftover ``--a.b value`` / ``--a.b=value`` tokens into pairs."""
    out = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) <= 2:
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"override {tok} needs a value")
            i += 1
            val = extra[i]
        out.append((key.replace("-", "_") if "." not in key else key, _parse_value(val)))
        i += 1
    return out


def apply_overrides(obj: dict[str, Any], overrides: Sequence[tuple[str, Any]]) -> dict[str, Any]:
    obj = copy.deepcopy(obj)
    known = {f.name for f in fields(ExperimentConfig)}
    for key, val in overrides:
        parts = key.split(".")
        if parts[0] not in known:
            raise UsageError(f"unknown override --{key}")
        node = obj
        for p in parts[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise UsageError(f"override --{key}: {p!r} is not a section")
            node = nxt
        node[parts[-1]] = val
    return obj


def load_experiment(path: str | None, overrides: Sequence[tuple[str, Any]] = ()) -> ExperimentConfig:
    if path is None:
        obj: dict[str, Any] = ExperimentConfig().to_obj()
        base = Path.cwd()
    else:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            obj = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise FormatError(e.msg, str(p), e.lineno) from None
        if not isinstance(obj, dict):
            raise ConfigError(f"{path}: experiment config must be a JSON object")
        base = p.resolve().parent
    return resolve(ExperimentConfig.from_obj(apply_overrides(obj, overrides)), base)


def build_workload(cfg: ExperimentConfig, repo: ModelRepository) -> list[TraceRequest]:
    wl = cfg.workload
    if "path" in wl:
        return read_workload(wl["path"], repo, allow_missing=bool(wl.get("allow_missing", False)))
    g = wl["generator"]
    gcfg = load_generator_config(g) if isinstance(g, str) else GeneratorConfig.from_obj(g)
    changes = {}
    if cfg.seed is not None:
        changes["seed"] = int(cfg.seed)
    if "num_requests" in wl:
        changes["num_requests"] = int(wl["num_requests"])
    if changes:
        from dataclasses import replace
        gcfg = replace(gcfg, **changes)
    return generate_workload(gcfg, repo)


def execute(cfg: ExperimentConfig, write: bool = True):
    """Run one resolved experiment; optionally write outputs to ``cfg.output_dir``."""
    repo = load_repository(cfg.repository)
    workload = build_workload(cfg, repo)
    mem = memory_config(cfg.memory)
    eng = engine_options(cfg.engine)
    res = simulate(repo, workload, mem, policy_config(cfg.policy), Mode(cfg.mode, cfg.model),
                   seed=cfg.seed or 0, **eng)
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(cfg, out)
        write_report(res.report, out / "report.json", "json")
        write_report(res.report, out / "report.csv", "csv")
        write_event_log(res.log, out / "events.jsonl")
        write_memory_timeline(res.report, out / "memory_timeline.csv")
        if cfg.plots:
            from .plots import plot_exit_table, plot_memory_timeline
            plot_exit_table(res.report, out / "exit_table.png")
            plot_memory_timeline(res.report, out / "memory_timeline.png", mem.capacity_bytes)
    return res


def write_resolved(cfg: ExperimentConfig, out: Path) -> Path:
    p = out / RESOLVED_NAME
    p.write_text(json.dumps(cfg.to_obj(), indent=2, sort_keys=True) + "\n")
    return p


# ------------------------------------------------------------------ commands

def cmd_run(args: argparse.Namespace, overrides: list[tuple[str, Any]]) -> int:
    pre = []
    if args.mode is not None:
        pre.append(("mode", args.mode))
    if args.model is not None:
        pre.append(("model", args.model))
    if args.seed is not None:
        pre.append(("seed", args.seed))
    if args.output_dir is not None:
        pre.append(("output_dir", args.output_dir))
    cfg = load_experiment(args.config, pre + overrides)
    res = execute(cfg)
    print(res.report.summary_line())
    for m, row in res.report.exit_table.items():
        print(f"  {m}: " + " ".join(f"L{l}={p:.2f}%" for l, p in sorted(row.items())))
    print(f"outputs written to {cfg.output_dir}")
    return EXIT_OK


def cmd_gen_trace(args: argparse.Namespace, overrides: list[tuple[str, Any]]) -> int:
    if overrides:
        raise UsageError("gen-trace takes no dotted overrides")
    repo = load_repository(_resolve_path(args.repository, Path.cwd()))
    gcfg = load_generator_config(_resolve_path(args.generator, Path.cwd()))
    from dataclasses import replace
    if args.seed is not None:
        gcfg = replace(gcfg, seed=args.seed)
    if args.num_requests is not None:
        gcfg = replace(gcfg, num_requests=args.num_requests)
    reqs = generate_workload(gcfg, repo)
    write_workload(reqs, args.out)
    summ = workload_summary(reqs, gcfg.confidence_law.th, gcfg.reference)
    print(f"wrote {len(reqs)} requests, {summ['tokens']} tokens to {args.out}")
    for m, row in summ["marginal"].items():
        print(f"  marginal {m}: " + " ".join(f"L{l}={100 * p:.2f}%" for l, p in row.items()))
    for m, rows in summ["coupling"].items():
        for a, row in rows.items():
            print(f"  P({m} | {summ['reference']}=L{a}): " + " ".join(f"L{l}={100 * p:.2f}%" for l, p in row.items()))
    for m, row in summ["unchanged"].items():
        print(f"  unchanged {m}: " + " ".join(f"L{l}={100 * p:.2f}%" for l, p in row.items()))
    return EXIT_OK


def _sweep_one(job: tuple[dict[str, Any], str, Any, str]) -> tuple[Any, str, dict[str, Any] | None, str]:
    obj, key, value, mode = job
    try:
        cfg = ExperimentConfig.from_obj(obj)
        cfg = resolve(ExperimentConfig.from_obj(apply_overrides(cfg.to_obj(), [(key, value)])), Path.cwd())
        md = Mode.parse(mode)
        cfg.mode, cfg.model = md.name, md.model
        rep = execute(cfg, write=False).report
        return value, mode, {"throughput": rep.throughput_tok_s, "ttft": rep.mean_ttft_s,
                             "tpot": rep.mean_tpot_s, "perplexity": rep.perplexity}, ""
    except EEServeError as e:
        return value, mode, None, f"{type(e).__name__}: {e}"


def cmd_sweep(args: argparse.Namespace, overrides: list[tuple[str, Any]]) -> int:
    values = [_parse_value(v) for v in args.values.split(",") if v.strip()] if args.values else []
    if not values:
        raise UsageError("sweep needs a nonempty --values list")
    modes = [m for m in args.modes.split(",") if m.strip()]
    if not modes:
        raise UsageError("sweep needs at least one mode")
    for m in modes:
        Mode.parse(m)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    key = args.param if "." in args.param else f"policy.{args.param}"
    pre = [("output_dir", args.output_dir)] if args.output_dir is not None else []
    cfg = load_experiment(args.config, pre + overrides)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    base = cfg.to_obj()
    jobs = [(base, key, v, m) for v in values for m in modes]
    if args.jobs == 1:
        results = [_sweep_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_sweep_one, jobs))
    failed = 0
    path = out / "sweep.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for value, mode, r, err in results:
            if r is None:
                failed += 1
                log.error("sweep %s=%s mode=%s failed: %s", key, value, mode, err)
                w.writerow([value, mode, "", "", "", "", err])
            else:
                ppl = "" if r["perplexity"] is None else repr(r["perplexity"])
                w.writerow([value, mode, repr(r["throughput"]), repr(r["ttft"]), repr(r["tpot"]), ppl, ""])
            if r is not None:
                print(f"{key}={value} {mode}: throughput={r['throughput']:.2f} tok/s")
    if cfg.plots:
        from .plots import plot_sweep
        series = {m: [next((r["throughput"] for v2, m2, r, _ in results if v2 == v and m2 == m and r), None)
                      for v in values] for m in modes}
        plot_sweep(args.param, values, series, out / "sweep.png")
    print(f"wrote {path}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_report(args: argparse.Namespace, overrides: list[tuple[str, Any]]) -> int:
    if overrides:
        raise UsageError("report takes no dotted overrides")
    rep = aggregate(read_event_log(args.events))
    fmt = args.format or (Path(args.out).suffix.lstrip(".") if args.out else "json")
    if args.out:
        write_report(rep, args.out, fmt)
        if args.plot:
            from .plots import plot_exit_table
            plot_exit_table(rep, Path(args.out).with_suffix(".png"))
    print(rep.summary_line())
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eeserve", description="Trace-driven early-exit LLM serving simulator.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one experiment")
    p.add_argument("--config", help="experiment JSON (defaults to the bundled calibration setup)")
    p.add_argument("--mode", help="helios, ee_single or vanilla, optionally mode:model")
    p.add_argument("--model", help="model id for single-model modes")
    p.add_argument("--seed", type=int, help="workload generator seed")
    p.add_argument("--output-dir", dest="output_dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen-trace", help="generate a synthetic JSONL workload")
    p.add_argument("--generator", required=True, help="generator config JSON")
    p.add_argument("--repository", default=PKG_PREFIX + "opt_repository.json")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--num-requests", dest="num_requests", type=int)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("sweep", help="run one simulation per (value, mode)")
    p.add_argument("--config")
    p.add_argument("--param", required=True, help="th, ri or any dotted config path")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--modes", default="helios", help="comma-separated modes")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--output-dir", dest="output_dir")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="re-aggregate an event log")
    p.add_argument("--events", required=True)
    p.add_argument("--out")
    p.add_argument("--format", choices=["json", "csv"])
    p.add_argument("--no-plot", dest="plot", action="store_false")
    p.set_defaults(func=cmd_report)
    return ap


def _setup_logging() -> None:
    name = os.environ.get("EESERVE_LOG_LEVEL", "warn").lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"EESERVE_LOG_LEVEL must be one of {list(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    try:
        args, extra = ap.parse_known_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        _setup_logging()
        return args.func(args, split_overrides(extra))
    except _USAGE_ERRORS as e:
        print(f"eeserve: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except EEServeError as e:
        print(f"eeserve: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"eeserve: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
