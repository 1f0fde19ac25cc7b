"""Backbone embedding extraction and the on-disk embedding dump format.

A dump is ``<stem>.npz`` holding ``features`` (float32, N x d) and ``labels``
(int64, N), next to ``<stem>.json`` with the provenance record (run_id,
boundary, split, backbone config hash, ...).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from ..data.augment import eval_tensor
from ..models.encoder import ContinualModel, FrozenSnapshot
from .metrics import EmbeddingMatrix


def compute_embeddings(state: ContinualModel | FrozenSnapshot, images: np.ndarray, labels: np.ndarray,
                       mean, std, batch_size: int = 512, source: dict | None = None) -> EmbeddingMatrix:
    """Embed uint8 images with the backbone only (projector and heads are never used)."""
    model = state.model if isinstance(state, FrozenSnapshot) else state
    was_training = model.training
    model.eval()
    chunks = []
    try:
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                x = eval_tensor(images[start:start + batch_size], mean, std)
                chunks.append(model.forward_features(x).numpy())
    finally:
        model.train(was_training)
    feats = np.concatenate(chunks) if chunks else np.zeros((0, model.feature_dim), dtype=np.float32)
    return EmbeddingMatrix(feats.astype(np.float32), np.asarray(labels, dtype=np.int64), dict(source or {}))


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_embeddings(stem, emb: EmbeddingMatrix, meta: dict | None = None) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    npz = stem.with_suffix(".npz")
    side = stem.with_suffix(".json")
    with open(npz, "wb") as fh:
        np.savez(fh, features=emb.features.astype(np.float32), labels=emb.labels.astype(np.int64))
    record = {**emb.source, **(meta or {}), "n": len(emb), "dim": emb.dim}
    side.write_text(json.dumps(record, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return npz, side


def load_embeddings(stem) -> EmbeddingMatrix:
    stem = Path(stem)
    if stem.suffix in (".npz", ".json"):
        stem = stem.with_suffix("")
    with np.load(stem.with_suffix(".npz")) as z:
        feats, labels = z["features"], z["labels"]
    side = stem.with_suffix(".json")
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
    return EmbeddingMatrix(feats, labels, meta)
