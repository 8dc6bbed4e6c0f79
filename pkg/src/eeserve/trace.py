"""Token-level oracle traces and the synthetic workload generator.

A trace records, for every decode token and every model, the confidence,
token id and log-probability the model would produce at each of its exit
layers.  Per-request data is stored as numpy arrays (tokens x exits) and
``TokenRecord`` objects are materialized only on demand.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, FormatError, ValidationError
from .model_spec import ModelRepository

log = logging.getLogger(__name__)

LOGPROB_FLOOR = math.log(1e-6)
_TOL = 1e-9


@dataclass(frozen=True)
class ExitObservation:
    layer: int
    token_id: int
    confidence: float
    logprob: float


@dataclass(frozen=True)
class ModelTokenRecord:
    final_token_id: int
    observations: tuple[ExitObservation, ...]


@dataclass(frozen=True)
class TokenRecord:
    per_model: Mapping[str, ModelTokenRecord]


@dataclass
class ModelTrace:
    """All tokens of one request as seen by one model."""

    layers: tuple[int, ...]
    confidence: np.ndarray  # (n_tokens, n_exits)
    token_id: np.ndarray
    logprob: np.ndarray
    final_token_id: np.ndarray  # (n_tokens,)

    @property
    def n_tokens(self) -> int:
        return int(self.final_token_id.shape[0])

    def earliest_exit_index(self, th: float) -> np.ndarray:
        """Index into ``layers`` of the shallowest confident exit per token."""
        ok = self.confidence >= th
        ok[:, -1] = True
        return ok.argmax(axis=1)

    def record(self, i: int) -> ModelTokenRecord:
        obs = tuple(
            ExitObservation(int(l), int(self.token_id[i, j]), float(self.confidence[i, j]), float(self.logprob[i, j]))
            for j, l in enumerate(self.layers)
        )
        return ModelTokenRecord(int(self.final_token_id[i]), obs)


@dataclass
class TraceRequest:
    request_id: int
    arrival_time_s: float
    prompt_len: int
    per_model: dict[str, ModelTrace]
    label: str = ""  # generator class, informational only

    @property
    def n_tokens(self) -> int:
        return next(iter(self.per_model.values())).n_tokens

    def token(self, i: int) -> TokenRecord:
        return TokenRecord({m: t.record(i) for m, t in self.per_model.items()})

    @property
    def tokens(self) -> list[TokenRecord]:
        return [self.token(i) for i in range(self.n_tokens)]

    @classmethod
    def from_tokens(cls, request_id: int, arrival_time_s: float, prompt_len: int,
                    tokens: Sequence[TokenRecord]) -> "TraceRequest":
        if not tokens:
            raise ValidationError(f"request {request_id}: tokens must be nonempty")
        per_model = {}
        for mid in tokens[0].per_model:
            recs = [t.per_model[mid] for t in tokens]
            layers = tuple(o.layer for o in recs[0].observations)
            per_model[mid] = ModelTrace(
                layers,
                np.array([[o.confidence for o in r.observations] for r in recs], dtype=float),
                np.array([[o.token_id for o in r.observations] for r in recs], dtype=np.int64),
                np.array([[o.logprob for o in r.observations] for r in recs], dtype=float),
                np.array([r.final_token_id for r in recs], dtype=np.int64),
            )
        return cls(request_id, float(arrival_time_s), int(prompt_len), per_model)

    def to_json_obj(self) -> dict[str, Any]:
        toks = []
        mids = list(self.per_model)
        for i in range(self.n_tokens):
            pm = {}
            for mid in mids:
                t = self.per_model[mid]
                pm[mid] = {
                    "final_token_id": int(t.final_token_id[i]),
                    "observations": [
                        {"layer": int(l), "token_id": int(t.token_id[i, j]),
                         "confidence": float(t.confidence[i, j]), "logprob": float(t.logprob[i, j])}
                        for j, l in enumerate(t.layers)
                    ],
                }
            toks.append({"per_model": pm})
        return {"request_id": self.request_id, "arrival_time_s": self.arrival_time_s,
                "prompt_len": self.prompt_len, "tokens": toks}


def earliest_confident_exit(rec: TokenRecord, model: str, th: float) -> int:
    """Shallowest exit layer whose confidence reaches ``th``; final layer otherwise."""
    obs = rec.per_model[model].observations
    for o in obs:
        if o.confidence >= th:
            return o.layer
    return obs[-1].layer


# ---------------------------------------------------------------- workload I/O

def write_workload(requests: Iterable[TraceRequest], path: str | Path) -> None:
    with open(path, "w") as f:
        for r in requests:
            f.write(json.dumps(r.to_json_obj(), separators=(",", ":")))
            f.write("\n")


def _parse_request(obj: Any, repo: ModelRepository, where: str, allow_missing: bool) -> TraceRequest:
    if not isinstance(obj, dict):
        raise ValidationError(f"{where}: request must be an object")
    try:
        rid = obj["request_id"]
        arrival = float(obj["arrival_time_s"])
        prompt_len = obj["prompt_len"]
        tokens = obj["tokens"]
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"{where}: missing or bad field {e}") from None
    if isinstance(rid, bool) or not isinstance(rid, int):
        raise ValidationError(f"{where}: request_id must be an integer")
    if not arrival >= 0:
        raise ValidationError(f"{where}: arrival_time_s must be >= 0")
    if isinstance(prompt_len, bool) or not isinstance(prompt_len, int) or prompt_len < 1:
        raise ValidationError(f"{where}: prompt_len must be a positive integer")
    if not isinstance(tokens, list) or not tokens:
        raise ValidationError(f"{where}: tokens must be a nonempty list")
    mids = list(tokens[0].get("per_model", {}))
    if not mids:
        raise ValidationError(f"{where}: token 0 has no per_model entries")
    for mid in mids:
        if mid not in repo:
            raise ValidationError(f"{where}: unknown model id {mid!r}")
    n = len(tokens)
    per_model: dict[str, ModelTrace] = {}
    warned_mono = False
    for mid in mids:
        layers = repo[mid].exit_layers
        E = len(layers)
        conf = np.empty((n, E))
        tid = np.empty((n, E), dtype=np.int64)
        lp = np.empty((n, E))
        fin = np.empty(n, dtype=np.int64)
        for i, tok in enumerate(tokens):
            try:
                rec = tok["per_model"][mid]
                fin[i] = rec["final_token_id"]
                obs = rec["observations"]
            except (KeyError, TypeError) as e:
                raise ValidationError(f"{where}: token {i}: model {mid!r}: missing {e}") from None
            seen: dict[int, dict] = {}
            for o in obs:
                layer = o.get("layer")
                if layer not in layers:
                    raise ValidationError(f"{where}: token {i}: model {mid!r}: layer {layer} is not an exit layer")
                if layer in seen:
                    raise ValidationError(f"{where}: token {i}: model {mid!r}: duplicate layer {layer}")
                seen[layer] = o
            if [o["layer"] for o in obs] != sorted(seen):
                raise ValidationError(f"{where}: token {i}: model {mid!r}: observations not sorted by layer")
            prev = None
            for j, layer in enumerate(layers):
                o = seen.get(layer)
                if o is None:
                    if not allow_missing or prev is None:
                        raise ValidationError(f"{where}: token {i}: model {mid!r}: missing observation at layer {layer}")
                    log.warning("%s: token %d: %s missing layer %d, reusing layer %d", where, i, mid, layer, prev["layer"])
                    o = prev
                c = float(o["confidence"])
                l_ = float(o["logprob"])
                if not 0.0 <= c <= 1.0:
                    raise ValidationError(f"{where}: token {i}: model {mid!r}: confidence {c} outside [0,1]")
                if not l_ <= 0.0:
                    raise ValidationError(f"{where}: token {i}: model {mid!r}: logprob {l_} > 0")
                conf[i, j], tid[i, j], lp[i, j] = c, int(o["token_id"]), l_
                prev = o
            if layers[-1] in seen and tid[i, -1] != fin[i]:
                raise ValidationError(f"{where}: token {i}: model {mid!r}: final observation token != final_token_id")
            if not warned_mono and np.any(np.diff(conf[i]) < 0):
                log.warning("%s: model %s: confidence decreases with depth (accepted)", where, mid)
                warned_mono = True
        per_model[mid] = ModelTrace(tuple(layers), conf, tid, lp, fin)
    return TraceRequest(rid, arrival, prompt_len, per_model)


def read_workload(path: str | Path, repo: ModelRepository, allow_missing: bool = False) -> list[TraceRequest]:
    """Parse and validate a JSONL workload file.

    With ``allow_missing`` a missing intermediate observation is filled from
    the deepest shallower one (with a warning) instead of failing.
    """
    out: list[TraceRequest] = []
    ids: set[int] = set()
    last_arrival = 0.0
    try:
        fh = open(path)
    except OSError as e:
        raise FormatError(f"cannot read workload: {e.strerror}", str(path)) from e
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(e.msg, str(path), lineno) from e
            req = _parse_request(obj, repo, f"{path}:{lineno}", allow_missing)
            if req.request_id in ids:
                raise ValidationError(f"{path}:{lineno}: duplicate request_id {req.request_id}")
            if req.arrival_time_s < last_arrival:
                raise ValidationError(f"{path}:{lineno}: arrival times must be non-decreasing")
            ids.add(req.request_id)
            last_arrival = req.arrival_time_s
            out.append(req)
    return out


# ------------------------------------------------------------- generator config

def _layer_map(d: Mapping[Any, float], what: str) -> dict[int, float]:
    try:
        return {int(k): float(v) for k, v in d.items()}
    except (TypeError, ValueError, AttributeError):
        raise ConfigError(f"{what}: expected a layer -> probability object") from None


def _check_row(row: Mapping[int, float], layers: Sequence[int], what: str) -> np.ndarray:
    if set(row) - set(layers):
        raise ConfigError(f"{what}: layers {sorted(set(row) - set(layers))} are not exits {list(layers)}")
    v = np.array([row.get(l, 0.0) for l in layers], dtype=float)
    if np.any(v < 0) or np.any(v > 1):
        raise ConfigError(f"{what}: probabilities must be in [0,1]")
    if abs(v.sum() - 1.0) > _TOL:
        raise ConfigError(f"{what}: row sums to {v.sum():.12g}, expected 1")
    return v


@dataclass(frozen=True)
class IntLaw:
    """Integer-valued law: ``uniform`` on [low, high] inclusive or ``constant``."""

    dist: str = "uniform"
    low: int = 1
    high: int = 1

    @classmethod
    def from_obj(cls, d: Any, what: str) -> "IntLaw":
        if isinstance(d, int) and not isinstance(d, bool):
            return cls("constant", d, d)
        if not isinstance(d, Mapping):
            raise ConfigError(f"{what}: expected an integer or a law object")
        dist = d.get("dist", "uniform")
        if dist == "constant":
            v = int(d["value"])
            law = cls("constant", v, v)
        elif dist == "uniform":
            law = cls("uniform", int(d["low"]), int(d["high"]))
        else:
            raise ConfigError(f"{what}: unknown dist {dist!r}")
        if law.low < 1 or law.high < law.low:
            raise ConfigError(f"{what}: need 1 <= low <= high")
        return law

    def to_obj(self) -> dict[str, Any]:
        if self.dist == "constant":
            return {"dist": "constant", "value": self.low}
        return {"dist": "uniform", "low": self.low, "high": self.high}

    @property
    def mean(self) -> float:
        return (self.low + self.high) / 2

    def draw(self, rng: np.random.Generator) -> int:
        if self.low == self.high:
            return self.low
        return int(rng.integers(self.low, self.high + 1))


@dataclass(frozen=True)
class ConfidenceLaw:
    """How confidences are drawn around the generator threshold.

    Layers at or past a token's earliest confident exit draw from
    ``confident``; shallower layers draw from ``below``.  Both default to
    the threshold split U[th, 1] / U[0, th).  ``low_conf_unchanged_prob``
    is P(early token == final token | confidence below th); None means the
    same as the layer's overall unchanged probability.
    """

    th: float = 0.7
    confident: tuple[float, float] | None = None
    below: tuple[float, float] | None = None
    low_conf_unchanged_prob: float | None = None

    def bounds(self) -> tuple[tuple[float, float], tuple[float, float]]:
        conf = tuple(self.confident) if self.confident is not None else (self.th, 1.0)
        below = tuple(self.below) if self.below is not None else (0.0, self.th)
        return conf, below  # type: ignore[return-value]

    def validate(self) -> None:
        (cl, ch), (bl, bh) = self.bounds()
        if not 0 <= self.th <= 1:
            raise ConfigError("confidence_law.th must be in [0,1]")
        if not (0 <= bl <= bh <= cl <= ch <= 1):
            raise ConfigError("confidence_law: need 0 <= below <= confident <= 1 with below entirely under confident")
        if not (cl >= self.th and bh <= self.th):
            raise ConfigError("confidence_law: confident range must sit at or above th and below range under it")
        p = self.low_conf_unchanged_prob
        if p is not None and not 0 <= p <= 1:
            raise ConfigError("confidence_law.low_conf_unchanged_prob must be in [0,1]")


@dataclass(frozen=True)
class RegimeClass:
    """A request class with its own reference-model exit distribution."""

    marginal: Mapping[int, float]
    coupling: Mapping[str, Mapping[int, Mapping[int, float]]] = field(default_factory=dict)
    final_low_prob: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class Schedule:
    """Periodic episodes of special classes embedded in background traffic.

    Each cycle is a background run of about ``period_requests - len(episode)``
    requests (scaled by U[1-jitter, 1+jitter]) followed by the episode.
    The background class absorbs the residual so that pooled statistics
    equal the global distributions.
    """

    period_requests: int
    episode: tuple[tuple[str, int], ...]
    jitter: float = 0.2


@dataclass(frozen=True)
class GeneratorConfig:
    models: tuple[tuple[str, Mapping[int, float]], ...]
    coupling: Mapping[str, Mapping[int, Mapping[int, float]]] = field(default_factory=dict)
    unchanged_prob: Mapping[str, Mapping[int, float]] = field(default_factory=dict)
    confidence_law: ConfidenceLaw = field(default_factory=ConfidenceLaw)
    num_requests: int = 100
    tokens_per_request_law: IntLaw = IntLaw("uniform", 48, 112)
    prompt_len_law: IntLaw = IntLaw("uniform", 96, 160)
    seed: int = 0
    vocab_size: int = 50272
    classes: Mapping[str, RegimeClass] = field(default_factory=dict)
    schedule: Schedule | None = None

    @property
    def reference(self) -> str:
        return self.models[0][0]

    # ---- (de)serialization
    @classmethod
    def from_obj(cls, d: Mapping[str, Any]) -> "GeneratorConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("generator config must be an object")
        try:
            models = tuple((m["id"], _layer_map(m["exit_distribution"], f"models[{m['id']}]")) for m in d["models"])
        except (KeyError, TypeError):
            raise ConfigError('generator: "models" must be a list of {id, exit_distribution}') from None
        coupling = {o: {int(a): _layer_map(row, f"coupling[{o}][{a}]") for a, row in rows.items()}
                    for o, rows in d.get("coupling", {}).items()}
        unchanged = {m: _layer_map(v, f"unchanged_prob[{m}]") for m, v in d.get("unchanged_prob", {}).items()}
        cl = d.get("confidence_law", {})
        law = ConfidenceLaw(
            th=float(cl.get("th", 0.7)),
            confident=tuple(cl["confident"]) if "confident" in cl else None,
            below=tuple(cl["below"]) if "below" in cl else None,
            low_conf_unchanged_prob=cl.get("low_conf_unchanged_prob"),
        )
        classes = {}
        for name, c in d.get("classes", {}).items():
            classes[name] = RegimeClass(
                marginal=_layer_map(c["marginal"], f"classes[{name}].marginal"),
                coupling={o: {int(a): _layer_map(row, f"classes[{name}].coupling") for a, row in rows.items()}
                          for o, rows in c.get("coupling", {}).items()},
                final_low_prob={m: float(p) for m, p in c.get("final_low_prob", {}).items()},
            )
        sch = None
        if d.get("schedule") is not None:
            s = d["schedule"]
            sch = Schedule(int(s["period_requests"]), tuple((str(a), int(b)) for a, b in s["episode"]),
                           float(s.get("jitter", 0.2)))
        cfg = cls(
            models=models, coupling=coupling, unchanged_prob=unchanged, confidence_law=law,
            num_requests=int(d.get("num_requests", 100)),
            tokens_per_request_law=IntLaw.from_obj(d.get("tokens_per_request_law", {"dist": "uniform", "low": 48, "high": 112}), "tokens_per_request_law"),
            prompt_len_law=IntLaw.from_obj(d.get("prompt_len_law", {"dist": "uniform", "low": 96, "high": 160}), "prompt_len_law"),
            seed=int(d.get("seed", 0)), vocab_size=int(d.get("vocab_size", 50272)),
            classes=classes, schedule=sch,
        )
        return cfg

    def to_obj(self) -> dict[str, Any]:
        def lm(m: Mapping[int, float]) -> dict[str, float]:
            return {str(k): v for k, v in m.items()}
        law = self.confidence_law
        cl: dict[str, Any] = {"th": law.th}
        if law.confident is not None:
            cl["confident"] = list(law.confident)
        if law.below is not None:
            cl["below"] = list(law.below)
        if law.low_conf_unchanged_prob is not None:
            cl["low_conf_unchanged_prob"] = law.low_conf_unchanged_prob
        out: dict[str, Any] = {
            "models": [{"id": m, "exit_distribution": lm(p)} for m, p in self.models],
            "coupling": {o: {str(a): lm(r) for a, r in rows.items()} for o, rows in self.coupling.items()},
            "unchanged_prob": {m: lm(v) for m, v in self.unchanged_prob.items()},
            "confidence_law": cl,
            "num_requests": self.num_requests,
            "tokens_per_request_law": self.tokens_per_request_law.to_obj(),
            "prompt_len_law": self.prompt_len_law.to_obj(),
            "seed": self.seed,
            "vocab_size": self.vocab_size,
        }
        if self.classes:
            out["classes"] = {
                n: {"marginal": lm(c.marginal),
                    "coupling": {o: {str(a): lm(r) for a, r in rows.items()} for o, rows in c.coupling.items()},
                    "final_low_prob": dict(c.final_low_prob)}
                for n, c in self.classes.items()
            }
        if self.schedule is not None:
            out["schedule"] = {"period_requests": self.schedule.period_requests,
                               "episode": [list(e) for e in self.schedule.episode],
                               "jitter": self.schedule.jitter}
        return out


def load_generator_config(path: str | Path) -> GeneratorConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise FormatError(f"cannot read generator config: {e.strerror}", str(path)) from e
    except json.JSONDecodeError as e:
        raise FormatError(e.msg, str(path), e.lineno) from e
    return GeneratorConfig.from_obj(raw)


# -------------------------------------------------------------- compiled tables

@dataclass
class _ClassTables:
    name: str
    ref_pmf: np.ndarray
    coupling_cdf: dict[str, np.ndarray]  # (n_ref_exits, n_other_exits) cumulative
    final_low: dict[str, float]


@dataclass
class _Compiled:
    ref: str
    layers: dict[str, tuple[int, ...]]
    classes: list[_ClassTables]
    sequence_weights: dict[str, float]
    p_conf: dict[str, np.ndarray]  # unchanged prob for confident observations, per column
    p_low: dict[str, np.ndarray]


def _compile(cfg: GeneratorConfig, repo: ModelRepository) -> _Compiled:
    if not cfg.models:
        raise ConfigError("generator: no models")
    if cfg.num_requests < 0:
        raise ConfigError("generator: num_requests must be >= 0")
    cfg.confidence_law.validate()
    ref = cfg.reference
    layers = {}
    marg = {}
    for mid, pmf in cfg.models:
        if mid not in repo:
            raise ConfigError(f"generator: model {mid!r} not in repository")
        layers[mid] = repo[mid].exit_layers
        marg[mid] = _check_row(pmf, layers[mid], f"models[{mid}].exit_distribution")
    ref_l = layers[ref]
    G = marg[ref]
    coup = {}
    for mid in layers:
        if mid == ref:
            continue
        rows = cfg.coupling.get(mid)
        if rows is None:
            # independent of the reference model
            coup[mid] = np.tile(marg[mid], (len(ref_l), 1))
        else:
            if set(rows) != set(ref_l):
                raise ConfigError(f"coupling[{mid}]: need one row per {ref} exit layer {list(ref_l)}")
            coup[mid] = np.array([_check_row(rows[a], layers[mid], f"coupling[{mid}][{a}]") for a in ref_l])
        implied = G @ coup[mid]
        if np.max(np.abs(implied - marg[mid])) > 1e-3:
            raise ConfigError(f"models[{mid}].exit_distribution {marg[mid].round(4).tolist()} disagrees with "
                              f"the coupling-implied marginal {implied.round(4).tolist()}")

    classes: list[_ClassTables] = []
    weights: dict[str, float] = {}
    if cfg.schedule is not None:
        sch = cfg.schedule
        ep_len = sum(c for _, c in sch.episode)
        if sch.period_requests < ep_len + 1:
            raise ConfigError("schedule.period_requests must exceed the episode length")
        if not 0 <= sch.jitter < 1:
            raise ConfigError("schedule.jitter must be in [0,1)")
        for name, cnt in sch.episode:
            if name not in cfg.classes:
                raise ConfigError(f"schedule: unknown class {name!r}")
            if cnt < 0:
                raise ConfigError("schedule: counts must be >= 0")
            weights[name] = weights.get(name, 0.0) + cnt / sch.period_requests
    w_bg = 1.0 - sum(weights.values())
    joint_res = {mid: G[:, None] * coup[mid] for mid in coup}
    ref_res = G.copy()
    for name, w in weights.items():
        c = cfg.classes[name]
        pm = _check_row(c.marginal, ref_l, f"classes[{name}].marginal")
        cc = {}
        for mid in coup:
            rows = c.coupling.get(mid, {})
            m = coup[mid].copy()
            for a, row in rows.items():
                if a not in ref_l:
                    raise ConfigError(f"classes[{name}].coupling[{mid}]: {a} is not a {ref} exit")
                m[ref_l.index(a)] = _check_row(row, layers[mid], f"classes[{name}].coupling[{mid}][{a}]")
            cc[mid] = m
            joint_res[mid] = joint_res[mid] - w * pm[:, None] * m
        ref_res = ref_res - w * pm
        for mid, q in c.final_low_prob.items():
            if mid not in layers or not 0 <= q <= 1:
                raise ConfigError(f"classes[{name}].final_low_prob[{mid}] invalid")
        classes.append(_ClassTables(name, pm, {m: np.cumsum(v, axis=1) for m, v in cc.items()}, dict(c.final_low_prob)))
    if weights:
        bg = ref_res / w_bg
        if np.any(bg < -1e-12):
            raise ConfigError(f"schedule: episode classes demand more mass than the global distribution allows "
                              f"(background {bg.round(4).tolist()})")
        bg = np.clip(bg, 0, None)
        bg /= bg.sum()
        bcoup = {}
        for mid, j in joint_res.items():
            rows = np.empty_like(j)
            for a in range(len(ref_l)):
                if bg[a] * w_bg <= 1e-12:
                    rows[a] = coup[mid][a]
                    continue
                r = j[a] / (w_bg * bg[a])
                if np.any(r < -1e-9):
                    raise ConfigError(f"schedule: residual coupling for {mid} row {ref_l[a]} is negative")
                r = np.clip(r, 0, None)
                rows[a] = r / r.sum()
            bcoup[mid] = np.cumsum(rows, axis=1)
        classes.insert(0, _ClassTables("background", bg, bcoup, {}))
    else:
        classes.insert(0, _ClassTables("background", G, {m: np.cumsum(v, axis=1) for m, v in coup.items()}, {}))

    # per-column unchanged probabilities, solved so pooled rate matches cfg
    p_conf, p_low = {}, {}
    pl = cfg.confidence_law.low_conf_unchanged_prob
    for mid in layers:
        m = G if mid == ref else G @ coup[mid]
        E = len(layers[mid])
        target = cfg.unchanged_prob.get(mid, {})
        bad = set(target) - set(layers[mid])
        if bad:
            raise ConfigError(f"unchanged_prob[{mid}]: {sorted(bad)} are not exit layers")
        pc = np.ones(E)
        plow = np.ones(E)
        for j, layer in enumerate(layers[mid][:-1]):
            u = target.get(layer, 1.0)
            if not 0 <= u <= 1:
                raise ConfigError(f"unchanged_prob[{mid}][{layer}] must be in [0,1]")
            f_below = float(m[j + 1:].sum())
            if pl is None:
                pc[j] = plow[j] = u
                continue
            plow[j] = pl
            if f_below >= 1 - 1e-12:
                pc[j] = u
                continue
            x = (u - f_below * pl) / (1 - f_below)
            if not -1e-9 <= x <= 1 + 1e-9:
                raise ConfigError(f"unchanged_prob[{mid}][{layer}]={u} unreachable with low-confidence rate {pl}")
            pc[j] = min(1.0, max(0.0, x))
        p_conf[mid], p_low[mid] = pc, plow
    return _Compiled(ref, layers, classes, weights, p_conf, p_low)


def _class_sequence(cfg: GeneratorConfig, comp: _Compiled) -> list[int]:
    n = cfg.num_requests
    if cfg.schedule is None:
        return [0] * n
    idx = {c.name: i for i, c in enumerate(comp.classes)}
    sch = cfg.schedule
    ep = [idx[name] for name, cnt in sch.episode for _ in range(cnt)]
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    seq: list[int] = []
    base = sch.period_requests - len(ep)
    while len(seq) < n:
        nbg = int(round(rng.uniform(1 - sch.jitter, 1 + sch.jitter) * base))
        seq.extend([0] * max(1, nbg))
        seq.extend(ep)
    return seq[:n]


def _draw_index(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling; ``cdf`` is 1-d or per-row 2-d."""
    if cdf.ndim == 1:
        return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
    return np.minimum((u[:, None] >= cdf).sum(axis=1), cdf.shape[1] - 1)


def _gen_request(cfg: GeneratorConfig, comp: _Compiled, rid: int, cls: _ClassTables) -> TraceRequest:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0, rid)))
    n = cfg.tokens_per_request_law.draw(rng)
    prompt_len = cfg.prompt_len_law.draw(rng)
    (cl, ch), (bl, bh) = cfg.confidence_law.bounds()
    th = cfg.confidence_law.th
    ref_idx = _draw_index(np.cumsum(cls.ref_pmf), rng.random(n))
    per_model = {}
    for mid, layers in comp.layers.items():
        E = len(layers)
        if mid == comp.ref:
            idx = ref_idx
        else:
            idx = _draw_index(cls.coupling_cdf[mid][ref_idx], rng.random(n))
        low_final = (idx == E - 1) & (rng.random(n) < cls.final_low.get(mid, 0.0))
        below = np.sort(rng.uniform(bl, bh, (n, E)), axis=1)
        above = np.sort(rng.uniform(cl, ch, (n, E)), axis=1)
        # bh == th is an open bound; uniform() never returns the upper end
        cols = np.arange(E)[None, :]
        use_below = (cols < idx[:, None]) | low_final[:, None]
        conf = np.where(use_below, below, above)
        final = rng.integers(0, cfg.vocab_size, n)
        p_keep = np.where(conf < th, comp.p_low[mid][None, :], comp.p_conf[mid][None, :])
        keep = rng.random((n, E)) < p_keep
        keep[:, -1] = True
        other = (final[:, None] + 1 + rng.integers(0, cfg.vocab_size - 1, (n, E))) % cfg.vocab_size
        tid = np.where(keep, final[:, None], other)
        lp = np.maximum(np.log(np.maximum(conf, 1e-300)), LOGPROB_FLOOR)
        per_model[mid] = ModelTrace(tuple(layers), conf, tid.astype(np.int64), lp, final.astype(np.int64))
    return TraceRequest(rid, 0.0, int(prompt_len), per_model, label=cls.name)


def generate_workload(cfg: GeneratorConfig, repo: ModelRepository) -> list[TraceRequest]:
    """Deterministic synthetic workload for ``cfg`` (closed-loop arrivals at t=0)."""
    comp = _compile(cfg, repo)
    seq = _class_sequence(cfg, comp)
    return [_gen_request(cfg, comp, rid, comp.classes[c]) for rid, c in enumerate(seq)]


# ------------------------------------------------------------------- summaries

def workload_summary(requests: Sequence[TraceRequest], th: float, reference: str | None = None) -> dict[str, Any]:
    """Empirical earliest-exit marginals, reference coupling and unchanged rates."""
    if not requests:
        return {"tokens": 0, "marginal": {}, "coupling": {}, "unchanged": {}}
    mids = list(requests[0].per_model)
    ref = reference or mids[0]
    idx = {m: np.concatenate([r.per_model[m].earliest_exit_index(th) for r in requests]) for m in mids}
    layers = {m: requests[0].per_model[m].layers for m in mids}
    total = len(idx[ref])
    marginal = {m: {l: float(np.mean(idx[m] == j)) for j, l in enumerate(layers[m])} for m in mids}
    coupling: dict[str, dict[int, dict[int, float]]] = {}
    for m in mids:
        if m == ref:
            continue
        rows = {}
        for a, la in enumerate(layers[ref]):
            sel = idx[ref] == a
            if sel.any():
                rows[la] = {l: float(np.mean(idx[m][sel] == j)) for j, l in enumerate(layers[m])}
        coupling[m] = rows
    unchanged = {}
    for m in mids:
        same = np.concatenate([r.per_model[m].token_id == r.per_model[m].final_token_id[:, None] for r in requests])
        unchanged[m] = {l: float(same[:, j].mean()) for j, l in enumerate(layers[m])}
    return {"tokens": int(total), "reference": ref, "marginal": marginal, "coupling": coupling, "unchanged": unchanged}
