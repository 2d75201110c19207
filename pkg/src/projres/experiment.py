"""Config-driven experiment runner: train, attack, write CSV/JSON results.

Output layout under ``output_dir``::

    manifest.json                       resolved config, version, seeds, hash
    results.csv                         one row per defense x attack x round
    <defense>/roc_<attack>_<round>.csv  ROC points (fpr, tpr)
    <defense>/scores_<attack>_<round>.csv  per-repetition scores
    <defense>/trace/                    trace dump when ``dump_traces`` is set

Everything except the manifest's timestamp is a pure function of the config.
"""
from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .attacks import draw_evaluation_pairs, evaluate_attack, make_attack
from .config import ExperimentConfig
from .data import synthetic_dataset, text_file_dataset
from .defenses import DefenseConfig
from .exceptions import InsufficientPopulationError, NeedsHistoryError, ValidationError
from .federation import TrainingTrace, run_training
from .io import atomic_write, export_trace
from .metrics import acc_fpr_at_threshold, roc_and_auc

RESULT_COLUMNS = ["config_hash", "seed", "dataset_seed", "defense", "defense_params", "attack",
                  "attack_params", "round", "repetitions", "auc", "acc", "fpr", "tau",
                  "member_mean_score", "nonmember_mean_score", "status"]


def artifact_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _compact(d) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def defense_slug(index: int, d: DefenseConfig) -> str:
    parts = [d.kind] + [f"{k}{v:g}" for k, v in sorted(d.params().items()) if k != "noise_seed"]
    return f"d{index}_" + re.sub(r"[^A-Za-z0-9.]+", "-", "-".join(parts))


@dataclass
class DataSplit:
    dataset: object
    train_ids: np.ndarray
    holdout_ids: np.ndarray


def build_data(cfg: ExperimentConfig) -> DataSplit:
    ds = cfg.dataset
    if ds["kind"] == "synthetic":
        data = synthetic_dataset(ds["num_samples"], cfg.backbone.vocab_size, cfg.num_classes,
                                 ds["min_len"], ds["max_len"], ds["seed"])
    else:
        path = Path(ds["path"])
        if not path.is_absolute() and cfg.source not in ("<config>", "--set"):
            path = Path(cfg.source).parent / path
        data = text_file_dataset(path, cfg.backbone.vocab_size, cfg.num_classes, ds["salt"],
                                 min(ds["max_len"], cfg.backbone.max_seq_len), ds["seed"])
    n = len(data)
    h = ds["holdout"]
    if n - h < cfg.federation.num_clients:
        raise ValidationError(f"dataset has {n} samples; {h} held out leaves too few for "
                              f"{cfg.federation.num_clients} clients")
    return DataSplit(data, np.arange(n - h), np.arange(n - h, n))


@dataclass
class CellResult:
    row: list
    roc: Optional[list]
    scores: Optional[list]


def evaluate_cell(cfg: ExperimentConfig, trace: TrainingTrace, model, split: DataSplit,
                  defense: DefenseConfig, attack_spec: Dict, round: int) -> CellResult:
    """Score one attack at one round of one trained trace."""
    attack = make_attack(attack_spec["kind"], **attack_spec["params"]).fit(trace, model)
    pairs = draw_evaluation_pairs(trace, round, split.holdout_ids, cfg.repetitions, cfg.eval_seed,
                                  nonmember_source=cfg.nonmember_source)
    base = [cfg.config_hash, cfg.federation.seed, cfg.dataset["seed"], defense.label,
            _compact(defense.params()), attack_spec["kind"], _compact(attack_spec["params"]), round,
            cfg.repetitions]
    try:
        res = evaluate_attack(attack, split.dataset, pairs)
    except (NeedsHistoryError, InsufficientPopulationError) as exc:
        status = "needs_history" if isinstance(exc, NeedsHistoryError) else "insufficient_population"
        return CellResult(base + [None, None, None, cfg.tau, None, None, status], None, None)
    roc = roc_and_auc(res.member_scores, res.nonmember_scores)
    acc = fpr = None
    if attack_spec["kind"] == "projres":
        acc, fpr = acc_fpr_at_threshold(-res.member_scores, -res.nonmember_scores, cfg.tau)
    row = base + [roc.auc, acc, fpr, cfg.tau, float(np.mean(res.member_scores)),
                  float(np.mean(res.nonmember_scores)), "ok"]
    scores = [[i, int(k), int(mi), int(ni), float(ms), float(ns)] for i, (k, mi, ni, ms, ns) in
              enumerate(zip(pairs.clients, pairs.member_ids, pairs.nonmember_ids,
                            res.member_scores, res.nonmember_scores))]
    return CellResult(row, roc.points, scores)


def write_cell(directory: Path, attack: str, round: int, cell: CellResult) -> None:
    if cell.roc is None:
        return
    atomic_write(directory / f"roc_{attack}_{round}.csv", _csv(["fpr", "tpr"], cell.roc))
    atomic_write(directory / f"scores_{attack}_{round}.csv",
                 _csv(["repetition", "client", "member_id", "nonmember_id", "member_score",
                       "nonmember_score"], cell.scores))


def evaluate_trace(cfg: ExperimentConfig, trace: TrainingTrace, model, split: DataSplit,
                   defense: DefenseConfig, directory: Path) -> List[list]:
    rows = []
    for t in cfg.eval_rounds:
        if t not in trace.records:
            raise ValidationError(f"evaluation round {t} is not in the trace")
        for spec in cfg.attacks:
            cell = evaluate_cell(cfg, trace, model, split, defense, spec, t)
            write_cell(directory, spec["kind"], t, cell)
            rows.append(cell.row)
    return rows


def write_manifest(cfg: ExperimentConfig, out: Path, extra=None) -> None:
    manifest = {
        "artifact_version": artifact_version(),
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash,
        "seeds": {"backbone": cfg.backbone.seed, "federation": cfg.federation.seed,
                  "dataset": cfg.dataset["seed"], "evaluation": cfg.eval_seed,
                  "defense_noise": [d.noise_seed for d in cfg.defenses]},
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    manifest.update(extra or {})
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> Path:
    """Train once per defense, evaluate every attack at every configured round."""
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = cfg.build_model()
    split = build_data(cfg)
    rows = []
    for i, defense in enumerate(cfg.defenses):
        cell_dir = out / defense_slug(i, defense)
        trace = run_training(cfg.federation_for(defense), split.dataset, model, split.train_ids)
        if cfg.dump_traces:
            export_trace(trace, cell_dir / "trace", {"config_hash": cfg.config_hash})
        rows.extend(evaluate_trace(cfg, trace, model, split, defense, cell_dir))
    atomic_write(out / "results.csv", _csv(RESULT_COLUMNS, rows))
    write_manifest(cfg, out)
    return out


def attack_trace(cfg: ExperimentConfig, trace: TrainingTrace, output_dir=None) -> Path:
    """Evaluate the configured attacks on a previously exported trace."""
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if len(trace.partitions) != cfg.federation.num_clients:
        raise ValidationError(f"trace has {len(trace.partitions)} clients, config expects "
                              f"{cfg.federation.num_clients}")
    defense = trace.config.defense or DefenseConfig()
    rows = evaluate_trace(cfg, trace, cfg.build_model(), build_data(cfg), defense,
                          out / defense_slug(0, defense))
    atomic_write(out / "results.csv", _csv(RESULT_COLUMNS, rows))
    write_manifest(cfg, out, {"trace_defense": defense.label})
    return out
