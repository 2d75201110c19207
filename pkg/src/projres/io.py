"""Binary array dumps and trace directories.

Array file layout (all integers little-endian)::

    offset 0   4 bytes   magic b"PRJR"
    offset 4   uint16    format version (1)
    offset 6   uint32    header length H in bytes
    offset 10  H bytes   UTF-8 JSON header
    offset 10+H          array data, back to back, in header order

The header is ``{"meta": {...}, "arrays": [{"name", "dtype", "shape",
"offset", "nbytes"}, ...]}`` where ``offset`` counts from the start of the
data block and ``dtype`` is ``"<f8"`` or ``"<i8"``. Arrays are C-ordered.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np

from .defenses import DefenseConfig
from .exceptions import ValidationError
from .federation import FederationConfig, RoundRecord, TrainingTrace
from .model import BackboneConfig, GradientUpdate

MAGIC = b"PRJR"
VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def atomic_write(path, data) -> None:
    """Write ``data`` (bytes or str) to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_arrays(arrays: Mapping[str, np.ndarray], meta=None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, a in arrays.items():
        a = np.asarray(a)
        if a.dtype.kind in "iub":
            a = np.ascontiguousarray(a, dtype="<i8")
        else:
            a = np.ascontiguousarray(a, dtype="<f8")
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<HI", VERSION, len(header)) + header + b"".join(chunks)


def decode_arrays(blob: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise ValidationError("not an array dump (bad magic)")
    version, hlen = struct.unpack("<HI", blob[4:10])
    if version != VERSION:
        raise ValidationError(f"unsupported dump version {version}")
    try:
        header = json.loads(blob[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"corrupt dump header: {exc}") from None
    data = blob[10 + hlen:]
    out = {}
    for e in header["arrays"]:
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise ValidationError(f"unsupported dtype {e['dtype']!r}")
        start, stop = e["offset"], e["offset"] + e["nbytes"]
        if stop > len(data):
            raise ValidationError(f"dump truncated in array {e['name']!r}")
        out[e["name"]] = np.frombuffer(data[start:stop], dtype=dt).reshape(e["shape"]).copy()
    return out, header.get("meta", {})


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta=None) -> None:
    atomic_write(path, encode_arrays(arrays, meta))


def load_arrays(path) -> Tuple[Dict[str, np.ndarray], dict]:
    return decode_arrays(Path(path).read_bytes())


# -- traces -------------------------------------------------------------------


def federation_to_dict(cfg: FederationConfig) -> dict:
    d = {"num_clients": cfg.num_clients, "batch_size": cfg.batch_size,
         "learning_rate": cfg.learning_rate, "rounds": cfg.rounds, "seed": cfg.seed}
    if cfg.defense is not None:
        d["defense"] = {"kind": cfg.defense.kind, "sigma": cfg.defense.sigma, "clip": cfg.defense.clip,
                        "beta": cfg.defense.beta, "noise_seed": cfg.defense.noise_seed}
    return d


def federation_from_dict(d: Mapping) -> FederationConfig:
    d = dict(d)
    defense = d.pop("defense", None)
    return FederationConfig(defense=None if defense is None else DefenseConfig(**defense), **d)


def export_trace(trace: TrainingTrace, directory, meta=None) -> Path:
    """Dump a trace as ``trace.json`` plus one array file per round.

    ``round_<t>.bin`` holds the global parameters (``params/<name>``) and every
    upload (``client<k>/<name>``). Ground truth (partitions, batches, losses)
    goes to ``ground_truth.bin`` so an adversary-only copy can omit it.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t in trace.rounds:
        rec = trace.records[t]
        arrays = {f"params/{k}": v for k, v in sorted(rec.params.items())}
        for c in sorted(rec.updates):
            for k, v in sorted(rec.updates[c].grads.items()):
                arrays[f"client{c}/{k}"] = v
        save_arrays(d / f"round_{t}.bin", arrays, {"round": t})
    save_arrays(d / "final_params.bin", dict(sorted(trace.final_params.items())))
    truth = {f"partition{k}": p for k, p in enumerate(trace.partitions)}
    for t in trace.rounds:
        rec = trace.records[t]
        for c in sorted(rec.batches):
            truth[f"batch/{t}/{c}"] = rec.batches[c]
        truth[f"losses/{t}"] = np.array([rec.losses[c] for c in sorted(rec.losses)])
        truth[f"loss_clients/{t}"] = np.array(sorted(rec.losses), dtype=np.int64)
    save_arrays(d / "ground_truth.bin", truth)
    info = {"format": "projres-trace", "version": VERSION, "federation": federation_to_dict(trace.config),
            "rounds": trace.rounds, "num_partitions": len(trace.partitions), "meta": meta or {}}
    atomic_write(d / "trace.json", json.dumps(info, indent=2, sort_keys=True) + "\n")
    return d


def _split(arrays, prefix):
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def import_trace(directory) -> TrainingTrace:
    """Load a directory written by :func:`export_trace`."""
    d = Path(directory)
    try:
        info = json.loads((d / "trace.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"{d} has no trace.json") from None
    if info.get("format") != "projres-trace":
        raise ValidationError(f"{d / 'trace.json'} is not a trace manifest")
    cfg = federation_from_dict(info["federation"])
    truth, _ = load_arrays(d / "ground_truth.bin")
    partitions = [truth[f"partition{k}"] for k in range(info["num_partitions"])]
    records = {}
    for t in info["rounds"]:
        arrays, _ = load_arrays(d / f"round_{t}.bin")
        params = _split(arrays, "params/")
        clients = sorted({int(k.split("/", 1)[0][len("client"):]) for k in arrays if k.startswith("client")})
        updates = {c: GradientUpdate(_split(arrays, f"client{c}/"), t, c) for c in clients}
        batches = {c: truth[f"batch/{t}/{c}"] for c in clients if f"batch/{t}/{c}" in truth}
        loss_clients = truth.get(f"loss_clients/{t}", np.array([], dtype=np.int64))
        losses = {int(c): float(v) for c, v in zip(loss_clients, truth.get(f"losses/{t}", []))}
        records[t] = RoundRecord(t, params, updates, batches, losses)
    final, _ = load_arrays(d / "final_params.bin")
    return TrainingTrace(cfg, records, partitions, final)


# -- model snapshots -----------------------------------------------------------


def save_backbone(backbone, path) -> None:
    """Dump every frozen array; the header meta carries the full BackboneConfig."""
    save_arrays(path, backbone.arrays(), {"backbone": asdict(backbone.config)})


def load_backbone_arrays(path):
    """Read a backbone dump back as ``(arrays, BackboneConfig)``."""
    arrays, meta = load_arrays(path)
    return arrays, BackboneConfig(**meta["backbone"])


def save_params(params: Mapping[str, np.ndarray], path, seed=None) -> None:
    save_arrays(path, dict(sorted(params.items())), {"seed": seed})
