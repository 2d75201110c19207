"""Experiment configuration: JSON schema, validation and override handling.

A config file is a JSON object; every key is optional and falls back to the
default toy setup. Precedence, lowest to highest: built-in defaults, the
config file, ``--set dotted.key=value`` overrides, dedicated CLI flags such as
``--output-dir``. Validation errors name the file, the line of the offending
key and the key's dotted path.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .attacks import ATTACKS, make_attack
from .defenses import DefenseConfig
from .exceptions import ValidationError
from .federation import FederationConfig
from .model import BackboneConfig, FedModel, ModuleSpec, build_backbone


class ConfigError(ValidationError):
    """Invalid configuration; ``str()`` is ``file:line: key: message``."""

    def __init__(self, message, source="<config>", line=None, key=None):
        self.source, self.line, self.key = source, line, key
        where = source if line is None else f"{source}:{line}"
        super().__init__(f"{where}: {key}: {message}" if key else f"{where}: {message}")


DEFAULTS: Dict[str, Any] = {
    "backbone": {"vocab_size": 256, "hidden_dim": 64, "num_frozen_layers": 2, "seed": 0,
                 "max_seq_len": 128, "anisotropy": 0.5, "hidden_scale": 0.003},
    "modules": [{"kind": "adapter", "ratio": 2.0, "position": 2, "module_id": "m0"}],
    "num_classes": 2,
    "pool": "all",
    "federation": {"num_clients": 30, "batch_size": 4, "learning_rate": 0.1, "rounds": 50, "seed": 0},
    "defenses": [{"kind": "none"}],
    "dataset": {"kind": "synthetic", "seed": 0, "num_samples": 900, "min_len": 2, "max_len": 4,
                "holdout": 300},
    "attacks": [{"kind": k} for k in ATTACKS],
    "tau": 1e-2,
    "evaluation": {"rounds": None, "repetitions": 100, "seed": 0, "nonmember_source": "holdout"},
    "output_dir": "results",
    "dump_traces": False,
}

_SECTIONS = {
    "backbone": set(DEFAULTS["backbone"]),
    "federation": set(DEFAULTS["federation"]),
    "evaluation": set(DEFAULTS["evaluation"]),
}
_DATASET_KEYS = {
    "synthetic": {"kind", "seed", "num_samples", "min_len", "max_len", "holdout"},
    "text_file": {"kind", "path", "salt", "max_len", "seed", "holdout"},
}
_MODULE_KEYS = {"kind", "ratio", "position", "module_id"}
_DEFENSE_KEYS = {"kind", "sigma", "clip", "beta", "noise_seed"}


# -- locating keys in the source text ------------------------------------------


def _skip_ws(s, i):
    while i < len(s) and s[i] in " \t\r\n":
        i += 1
    return i


def key_lines(text: str) -> Dict[Tuple, int]:
    """Map each JSON path (tuple of keys / list indices) to its 1-based source line.

    Assumes ``text`` is valid JSON (call after ``json.loads`` succeeded).
    """
    decoder = json.JSONDecoder()
    out: Dict[Tuple, int] = {}

    def line_of(i):
        return text.count("\n", 0, i) + 1

    def walk(i, path):
        i = _skip_ws(text, i)
        out.setdefault(path, line_of(i))
        c = text[i]
        if c == "{":
            i = _skip_ws(text, i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                i = _skip_ws(text, i)
                key, j = json.decoder.scanstring(text, i + 1)
                out[path + (key,)] = line_of(i)
                j = _skip_ws(text, j)
                i = walk(j + 1, path + (key,))
                i = _skip_ws(text, i)
                if text[i] == "}":
                    return i + 1
                i += 1
        if c == "[":
            i = _skip_ws(text, i + 1)
            if text[i] == "]":
                return i + 1
            k = 0
            while True:
                i = walk(i, path + (k,))
                i = _skip_ws(text, i)
                if text[i] == "]":
                    return i + 1
                i += 1
                k += 1
        _, end = decoder.raw_decode(text, i)
        return end

    if text.strip():
        walk(0, ())
    return out


# -- the resolved config -------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Fully resolved experiment: every field has a concrete value."""

    raw: Dict[str, Any]
    backbone: BackboneConfig
    modules: Tuple[ModuleSpec, ...]
    federation: FederationConfig
    defenses: Tuple[DefenseConfig, ...]
    dataset: Dict[str, Any]
    attacks: Tuple[Dict[str, Any], ...]
    tau: float
    eval_rounds: Tuple[int, ...]
    repetitions: int
    eval_seed: int
    nonmember_source: str
    output_dir: str
    dump_traces: bool
    source: str = "<config>"
    num_classes: int = 2
    pool: str = "all"

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.raw)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"

    @property
    def config_hash(self) -> str:
        """Short SHA-256 of the canonical config, ignoring ``output_dir`` and ``dump_traces``."""
        body = {k: v for k, v in self.raw.items() if k not in ("output_dir", "dump_traces")}
        canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def build_model(self) -> FedModel:
        return FedModel(build_backbone(self.backbone), self.modules, self.num_classes, self.pool)

    def federation_for(self, defense: DefenseConfig) -> FederationConfig:
        f = self.federation
        return FederationConfig(f.num_clients, f.batch_size, f.learning_rate, f.rounds, f.seed,
                                None if defense.kind == "none" else defense)


def _merge(base, over):
    if isinstance(base, dict) and isinstance(over, dict):
        out = dict(base)
        for k, v in over.items():
            out[k] = _merge(base.get(k), v) if k in base else copy.deepcopy(v)
        return out
    return copy.deepcopy(over)


def parse_override(item: str) -> Tuple[List[str], Any]:
    """``a.b.c=value`` -> (["a", "b", "c"], value); the value is JSON if it parses, else a string."""
    key, sep, value = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r} is not of the form key=value", "--set")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip().split("."), parsed


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    data = copy.deepcopy(data)
    for item in overrides:
        path, value = parse_override(item)
        node = data
        for p in path[:-1]:
            if isinstance(node, list):
                try:
                    node = node[int(p)]
                except (ValueError, IndexError):
                    raise ConfigError(f"no list element {p!r}", "--set", key=".".join(path)) from None
                continue
            node = node.setdefault(p, {})
            if not isinstance(node, (dict, list)):
                raise ConfigError("cannot descend into a scalar", "--set", key=".".join(path))
        last = path[-1]
        if isinstance(node, list):
            try:
                node[int(last)] = value
            except (ValueError, IndexError):
                raise ConfigError(f"no list element {last!r}", "--set", key=".".join(path)) from None
        else:
            node[last] = value
    return data


class _Checker:
    def __init__(self, source, lines):
        self.source, self.lines = source, lines

    def fail(self, path, message):
        line = None
        for k in range(len(path), 0, -1):
            if tuple(path[:k]) in self.lines:
                line = self.lines[tuple(path[:k])]
                break
        raise ConfigError(message, self.source, line, ".".join(str(p) for p in path))

    def keys(self, obj, allowed, path):
        if not isinstance(obj, dict):
            self.fail(path, f"expected an object, got {type(obj).__name__}")
        for k in obj:
            if k not in allowed:
                self.fail(path + (k,), f"unknown key; expected one of {sorted(allowed)}")

    def build(self, factory, kwargs, path):
        try:
            return factory(**kwargs)
        except ValidationError as exc:
            bad = next((k for k in kwargs if k in str(exc)), None)
            self.fail(path + ((bad,) if bad else ()), str(exc))
        except TypeError as exc:
            self.fail(path, f"bad field types: {exc}")


def _int(ck, v, path, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        ck.fail(path, f"expected an integer, got {v!r}")
    if lo is not None and v < lo:
        ck.fail(path, f"must be >= {lo}, got {v}")
    return v


def _num(ck, v, path):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        ck.fail(path, f"expected a number, got {v!r}")
    return float(v)


def resolve(data: Dict[str, Any], source: str = "<config>", lines=None) -> ExperimentConfig:
    """Merge ``data`` over the defaults and validate every field."""
    ck = _Checker(source, lines or {})
    if not isinstance(data, dict):
        ck.fail((), "top level must be a JSON object")
    for k in data:
        if k not in DEFAULTS:
            ck.fail((k,), f"unknown key; expected one of {sorted(DEFAULTS)}")
    raw = _merge(DEFAULTS, data)
    # lists replace rather than merge
    for k in ("modules", "defenses", "attacks"):
        if k in data:
            raw[k] = copy.deepcopy(data[k])
    if "dataset" in data and isinstance(data["dataset"], dict) and \
            data["dataset"].get("kind", "synthetic") != "synthetic":
        raw["dataset"] = copy.deepcopy(data["dataset"])

    for sec, allowed in _SECTIONS.items():
        ck.keys(raw[sec], allowed, (sec,))

    bb = raw["backbone"]
    for k in ("vocab_size", "hidden_dim", "num_frozen_layers", "seed", "max_seq_len"):
        _int(ck, bb[k], ("backbone", k))
    for k in ("anisotropy", "hidden_scale"):
        _num(ck, bb[k], ("backbone", k))
    backbone = ck.build(BackboneConfig, bb, ("backbone",))

    if not isinstance(raw["modules"], list) or not raw["modules"]:
        ck.fail(("modules",), "expected a non-empty list of module specs")
    modules = []
    for i, m in enumerate(raw["modules"]):
        ck.keys(m, _MODULE_KEYS, ("modules", i))
        if "kind" not in m:
            ck.fail(("modules", i), "missing 'kind'")
        modules.append(ck.build(ModuleSpec, m, ("modules", i)))
    ncls = _int(ck, raw["num_classes"], ("num_classes",), 2)
    if raw["pool"] not in ("all", "nonpad"):
        ck.fail(("pool",), f"expected 'all' or 'nonpad', got {raw['pool']!r}")
    try:
        FedModel(build_backbone(backbone), tuple(modules), ncls, raw["pool"])
    except ValidationError as exc:
        ck.fail(("modules",), str(exc))

    fd = raw["federation"]
    for k in ("num_clients", "batch_size", "rounds", "seed"):
        _int(ck, fd[k], ("federation", k))
    _num(ck, fd["learning_rate"], ("federation", "learning_rate"))
    federation = ck.build(FederationConfig, fd, ("federation",))

    if not isinstance(raw["defenses"], list) or not raw["defenses"]:
        ck.fail(("defenses",), "expected a non-empty list of defense specs")
    defenses = []
    for i, d in enumerate(raw["defenses"]):
        ck.keys(d, _DEFENSE_KEYS, ("defenses", i))
        if "kind" not in d:
            ck.fail(("defenses", i), "missing 'kind'")
        defenses.append(ck.build(DefenseConfig, d, ("defenses", i)))

    ds = raw["dataset"]
    if not isinstance(ds, dict) or ds.get("kind") not in _DATASET_KEYS:
        ck.fail(("dataset", "kind"), f"expected one of {sorted(_DATASET_KEYS)}")
    ck.keys(ds, _DATASET_KEYS[ds["kind"]], ("dataset",))
    if ds["kind"] == "text_file":
        if not isinstance(ds.get("path"), str):
            ck.fail(("dataset", "path"), "text_file dataset needs a 'path' string")
        ds.setdefault("salt", "")
        ds.setdefault("max_len", 64)
        ds.setdefault("seed", 0)
        ds.setdefault("holdout", 0)
    else:
        _int(ck, ds["num_samples"], ("dataset", "num_samples"), 1)
        _int(ck, ds["min_len"], ("dataset", "min_len"), 1)
        _int(ck, ds["max_len"], ("dataset", "max_len"), 1)
        if ds["min_len"] > ds["max_len"]:
            ck.fail(("dataset", "min_len"), "min_len exceeds max_len")
        if ds["max_len"] > backbone.max_seq_len:
            ck.fail(("dataset", "max_len"), f"exceeds backbone.max_seq_len {backbone.max_seq_len}")
        if ds["num_samples"] - ds["holdout"] < federation.num_clients:
            ck.fail(("dataset", "num_samples"), "fewer training samples than clients")
    _int(ck, ds["seed"], ("dataset", "seed"), 0)
    _int(ck, ds["holdout"], ("dataset", "holdout"), 0)

    if not isinstance(raw["attacks"], list) or not raw["attacks"]:
        ck.fail(("attacks",), "expected a non-empty list of attacks")
    attacks = []
    for i, a in enumerate(raw["attacks"]):
        if isinstance(a, str):
            a = {"kind": a}
            raw["attacks"][i] = a
        ck.keys(a, {"kind", "params"}, ("attacks", i))
        if a.get("kind") not in ATTACKS:
            ck.fail(("attacks", i, "kind"), f"unknown attack {a.get('kind')!r}; expected one of {sorted(ATTACKS)}")
        params = a.get("params", {})
        try:
            make_attack(a["kind"], **params)
        except TypeError as exc:
            ck.fail(("attacks", i, "params"), str(exc))
        attacks.append({"kind": a["kind"], "params": dict(params)})

    tau = _num(ck, raw["tau"], ("tau",))
    if not tau > 0:
        ck.fail(("tau",), f"must be positive, got {tau}")

    ev = raw["evaluation"]
    rounds = ev["rounds"]
    if rounds is None:
        rounds = [federation.rounds - 1]
    if not isinstance(rounds, list) or not rounds:
        ck.fail(("evaluation", "rounds"), "expected a non-empty list of round indices or null")
    for j, r in enumerate(rounds):
        _int(ck, r, ("evaluation", "rounds", j))
        if not 0 <= r < federation.rounds:
            ck.fail(("evaluation", "rounds", j), f"round {r} outside [0, {federation.rounds})")
    reps = _int(ck, ev["repetitions"], ("evaluation", "repetitions"), 1)
    eseed = _int(ck, ev["seed"], ("evaluation", "seed"), 0)
    if ev["nonmember_source"] not in ("holdout", "other_clients"):
        ck.fail(("evaluation", "nonmember_source"), "expected 'holdout' or 'other_clients'")
    if ev["nonmember_source"] == "holdout" and ds["holdout"] < 1:
        ck.fail(("dataset", "holdout"), "holdout non-members requested but dataset.holdout is 0")
    if not isinstance(raw["output_dir"], str) or not raw["output_dir"]:
        ck.fail(("output_dir",), "expected a non-empty path string")
    if not isinstance(raw["dump_traces"], bool):
        ck.fail(("dump_traces",), "expected true or false")

    return ExperimentConfig(raw=raw, backbone=backbone, modules=tuple(modules), federation=federation,
                            defenses=tuple(defenses), dataset=dict(ds), attacks=tuple(attacks), tau=tau,
                            eval_rounds=tuple(rounds), repetitions=reps, eval_seed=eseed,
                            nonmember_source=ev["nonmember_source"], output_dir=raw["output_dir"],
                            dump_traces=raw["dump_traces"], source=source, num_classes=ncls,
                            pool=raw["pool"])


def loads(text: str, source: str = "<config>", overrides: Sequence[str] = ()) -> ExperimentConfig:
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", source, exc.lineno) from None
    lines = key_lines(text)
    if overrides:
        data = apply_overrides(data, overrides)
    return resolve(data, source, lines)


def load(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(p)) from None
    return loads(text, str(p), overrides)


def default_config_text() -> str:
    """The bundled default config file."""
    return resources.files("projres").joinpath("default_config.json").read_text(encoding="utf-8")
