"""Caption retrieval from predicted embeddings.

Predicted embeddings are turned into text by exact nearest-neighbour search
(cosine similarity) over a bank of training-side images and their captions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Dataset, WindowSample
from .errors import DegenerateInputError, DimensionMismatchError, EmptyPairSetError, FormatError

N_OFFSETS = 3
# candidates within this distance of the best matrix-product score are re-scored one by one
_TIE_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class CaptionBank:
    image_ids: np.ndarray  # (n,) int64, ascending
    embeddings: np.ndarray  # (n, d_c) float64
    captions: tuple[str, ...]

    def __post_init__(self):
        n = self.image_ids.shape[0]
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != n or len(self.captions) != n:
            raise DimensionMismatchError(
                f"bank fields disagree: {n} ids, embeddings {self.embeddings.shape}, {len(self.captions)} captions"
            )
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(norms == 0):
            bad = int(self.image_ids[np.flatnonzero(norms == 0)[0]])
            raise DegenerateInputError(f"bank embedding for image {bad} has zero norm")
        object.__setattr__(self, "_unit", self.embeddings / norms[:, None])

    def __len__(self) -> int:
        return int(self.image_ids.shape[0])

    @property
    def d_c(self) -> int:
        return int(self.embeddings.shape[1])

    @property
    def entries(self) -> list[tuple[int, np.ndarray, str]]:
        return [(int(i), e, c) for i, e, c in zip(self.image_ids, self.embeddings, self.captions)]


def bank_from_entries(entries: Iterable[tuple[int, np.ndarray, str]]) -> CaptionBank:
    rows = sorted(entries, key=lambda e: int(e[0]))
    if not rows:
        raise EmptyPairSetError("caption bank needs at least one entry")
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    if np.any(np.diff(ids) == 0):
        raise ValueError("duplicate image_id in caption bank entries")
    emb = np.stack([np.asarray(r[1], dtype=np.float64) for r in rows])
    return CaptionBank(ids, emb, tuple(str(r[2]) for r in rows))


def build_bank(dataset: Dataset, train_windows: Sequence[WindowSample]) -> CaptionBank:
    """One entry per distinct image seen in the training windows, first caption only."""
    if not train_windows:
        raise EmptyPairSetError("cannot build a caption bank from an empty training set")
    ids = sorted({iid for w in train_windows for iid in w.target_image_ids})
    entries = []
    for iid in ids:
        rec = dataset.image(iid)
        entries.append((iid, rec.embedding, rec.captions[0]))
    return bank_from_entries(entries)


def _unit_queries(preds: np.ndarray, d_c: int) -> np.ndarray:
    q = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    if q.shape[1] != d_c:
        raise DimensionMismatchError(f"prediction has d_c={q.shape[1]}, bank has d_c={d_c}")
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise DegenerateInputError("cannot retrieve a caption for a zero-norm or non-finite prediction")
    return q / norms[:, None]


def nearest_indices(preds: np.ndarray, bank: CaptionBank) -> tuple[np.ndarray, np.ndarray]:
    """Bank row and cosine similarity of the best match for each query row.

    Scores come from one matrix product; every entry within a tiny slack of
    the maximum is then re-scored with the same scalar dot product so exact
    ties resolve to the lowest image_id regardless of BLAS blocking.
    """
    unit = bank._unit
    q = _unit_queries(preds, bank.d_c)
    scores = q @ unit.T
    best = scores.max(axis=1)
    rows = np.empty(q.shape[0], dtype=np.int64)
    sims = np.empty(q.shape[0])
    for i in range(q.shape[0]):
        cand = np.flatnonzero(scores[i] >= best[i] - _TIE_SLACK)
        if cand.size == 1:
            rows[i], sims[i] = cand[0], scores[i, cand[0]]
            continue
        exact = [float(np.dot(np.ascontiguousarray(unit[j]), q[i])) for j in cand]
        j = int(np.argmax(exact))  # first maximum, and cand is ascending in image_id
        rows[i], sims[i] = cand[j], exact[j]
    return rows, np.clip(sims, -1.0, 1.0)


def nearest_caption(pred, bank: CaptionBank) -> tuple[str, int, float]:
    rows, sims = nearest_indices(np.asarray(pred, dtype=np.float64)[None, :], bank)
    j = int(rows[0])
    return bank.captions[j], int(bank.image_ids[j]), float(sims[0])


def decode_window(preds: np.ndarray, bank: CaptionBank) -> list[tuple[str, int, float]]:
    """Captions for the predictions of one window, ordered [k=0, 1, 2]."""
    preds = np.asarray(preds, dtype=np.float64)
    if preds.shape[0] != N_OFFSETS:
        raise DimensionMismatchError(f"expected {N_OFFSETS} offset predictions, got {preds.shape[0]}")
    rows, sims = nearest_indices(preds, bank)
    return [(bank.captions[j], int(bank.image_ids[j]), float(s)) for j, s in zip(rows, sims)]


def offset_gallery(dataset: Dataset, windows: Sequence[WindowSample], k: int) -> CaptionBank:
    """Distinct images at offset ``k`` of the given windows, as a retrieval gallery."""
    ids = sorted({w.target_image_ids[k] for w in windows})
    return bank_from_entries((i, dataset.image(i).embedding, dataset.image(i).captions[0]) for i in ids)


def decode_records(
    preds: np.ndarray,
    windows: Sequence[WindowSample],
    dataset: Dataset,
    bank: CaptionBank,
    method: str,
    alpha: float | None,
    seed: int,
) -> list[dict]:
    """One JSON-ready record per (window, k).

    Besides the bank caption, each record carries ``identified_image_id``:
    the nearest image among the distinct test images at the same offset.
    Top-1 accuracy is the rate at which it equals ``true_image_id`` (the
    bank holds no test image, so bank retrieval can never hit the truth).
    """
    preds = np.asarray(preds)
    if preds.ndim != 3 or preds.shape[:2] != (len(windows), N_OFFSETS):
        raise DimensionMismatchError(f"predictions {preds.shape} do not match {len(windows)} windows x {N_OFFSETS} offsets")
    rows, sims = nearest_indices(preds.reshape(-1, preds.shape[2]), bank)
    rows = rows.reshape(len(windows), N_OFFSETS)
    sims = sims.reshape(len(windows), N_OFFSETS)
    ident = np.empty((len(windows), N_OFFSETS), dtype=np.int64)
    for k in range(N_OFFSETS):
        gallery = offset_gallery(dataset, windows, k)
        hit, _ = nearest_indices(preds[:, k], gallery)
        ident[:, k] = gallery.image_ids[hit]
    out = []
    for i, w in enumerate(windows):
        for k in range(N_OFFSETS):
            true_id = int(w.target_image_ids[k])
            out.append(
                {
                    "anchor": list(w.anchor),
                    "k": k,
                    "predicted_caption": bank.captions[rows[i, k]],
                    "true_captions": list(dataset.image(true_id).captions),
                    "retrieved_image_id": int(bank.image_ids[rows[i, k]]),
                    "similarity": float(sims[i, k]),
                    "true_image_id": true_id,
                    "identified_image_id": int(ident[i, k]),
                    "method": method,
                    "alpha": alpha,
                    "seed": int(seed),
                }
            )
    return out


RECORD_SCHEMA = {
    "type": "object",
    "required": [
        "anchor", "k", "predicted_caption", "true_captions", "retrieved_image_id",
        "similarity", "true_image_id", "identified_image_id", "method", "alpha", "seed",
    ],
    "properties": {
        "anchor": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 3, "maxItems": 3},
        "k": {"type": "integer", "minimum": 0, "maximum": N_OFFSETS - 1},
        "predicted_caption": {"type": "string"},
        "true_captions": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "retrieved_image_id": {"type": "integer", "minimum": 0},
        "similarity": {"type": "number", "minimum": -1, "maximum": 1},
        "true_image_id": {"type": "integer", "minimum": 0},
        "identified_image_id": {"type": "integer", "minimum": 0},
        "method": {"enum": ["sf", "dis"]},
        "alpha": {"type": ["number", "null"], "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
    },
}


def write_jsonl(records: Iterable[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False))
            fh.write("\n")
    tmp.replace(path)


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return out
