"""JSON-lines manifests and dataset loading.

A manifest holds one record per utterance: ``id``, ``channel_paths`` (one
mono WAV per channel), optional ``relevance`` labels, optional
``clean_path`` (dry reference) and optional geometry metadata written by
the simulator. Paths are resolved relative to the manifest's directory.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dsp import logmel_features, read_wav, subband_envelopes
from .evaluation import RankingResult
from .training import RankingUtterance, normalize_relevance


def validate_record(rec: dict, where: str) -> dict:
    if "id" not in rec:
        raise ValueError(f"{where}: record without an id")
    paths = rec.get("channel_paths")
    if not paths or not isinstance(paths, list):
        raise ValueError(f"{where}: record {rec['id']!r} has no channel_paths")
    rel = rec.get("relevance")
    if rel is not None and len(rel) != len(paths):
        raise ValueError(
            f"{where}: record {rec['id']!r} has {len(rel)} relevance values "
            f"for {len(paths)} channels"
        )
    return rec


def read_manifest(path) -> list[dict]:
    path = Path(path)
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            records.append(validate_record(json.loads(line),
                                           f"{path}:{lineno}"))
    return records


def write_manifest(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def resolve_path(manifest_path, rel_path) -> Path:
    p = Path(rel_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def require_relevance(rec: dict, manifest_path) -> list:
    rel = rec.get("relevance")
    if rel is None:
        raise ValueError(
            f"{manifest_path}: record {rec['id']!r} is missing relevance labels"
        )
    return rel


def load_ranking_dataset(manifest_path, metric: str = "raw",
                         strategy: str = "listnet") -> list[RankingUtterance]:
    """Read WAVs, extract log-mels and normalized relevance per utterance."""
    utts = []
    for rec in read_manifest(manifest_path):
        rel = require_relevance(rec, manifest_path)
        feats = [
            logmel_features(read_wav(resolve_path(manifest_path, p))).frames
            for p in rec["channel_paths"]
        ]
        w = [normalize_relevance(metric, v, strategy) for v in rel]
        utts.append(RankingUtterance(rec["id"], feats, np.asarray(w)))
    return utts


def load_envelope_dataset(manifest_path) -> list[tuple]:
    """(envelopes, best-channel) tuples for EV weight training."""
    dataset = []
    for rec in read_manifest(manifest_path):
        rel = require_relevance(rec, manifest_path)
        envs = [
            subband_envelopes(read_wav(resolve_path(manifest_path, p)))
            for p in rec["channel_paths"]
        ]
        dataset.append((envs, int(np.argmax(rel))))
    return dataset


def write_rankings(path_or_fh, rankings: Sequence[RankingResult]) -> None:
    own = not hasattr(path_or_fh, "write")
    fh = open(path_or_fh, "w", encoding="utf-8") if own else path_or_fh
    try:
        for r in rankings:
            fh.write(json.dumps({
                "id": r.utt_id,
                "method": r.method,
                "order": r.order,
                "scores": [float(s) for s in r.scores],
            }) + "\n")
    finally:
        if own:
            fh.close()


def read_rankings(path) -> list[RankingResult]:
    rankings = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            rankings.append(RankingResult(
                utt_id=rec["id"], order=rec["order"],
                scores=np.asarray(rec["scores"]), method=rec["method"],
            ))
    return rankings
