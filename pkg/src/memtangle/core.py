"""Dataset model, sliding windows, contamination-free splitting and MDST I/O."""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    CaptionEncodingError,
    ConfigError,
    FormatError,
    OverContaminatedSplitError,
    TruncatedPayloadError,
    ValidationError,
    VersionMismatchError,
)
from .rng import Pcg32

MDST_MAGIC = b"MDST"
MDST_VERSION = 1


@dataclass(frozen=True, eq=False)
class ImageRecord:
    image_id: int
    embedding: np.ndarray  # float32, length d_c
    captions: tuple[str, ...]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.captions == other.captions
            and _bits_equal(self.embedding, other.embedding)
        )


@dataclass(frozen=True)
class Trial:
    session_index: int
    run_index: int
    trial_index: int
    image_id: int
    fmri: np.ndarray


@dataclass(eq=False)
class Run:
    """One run stored column-wise: ``image_ids[t]`` and ``fmri[t]`` belong to trial t."""

    image_ids: np.ndarray  # int64, (n_trials,)
    fmri: np.ndarray  # float32, (n_trials, d_f)

    def __post_init__(self):
        self.image_ids = np.ascontiguousarray(self.image_ids, dtype=np.int64)
        self.fmri = np.ascontiguousarray(self.fmri, dtype=np.float32)

    def __len__(self) -> int:
        return int(self.image_ids.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Run):
            return NotImplemented
        return np.array_equal(self.image_ids, other.image_ids) and _bits_equal(self.fmri, other.fmri)


@dataclass(eq=False)
class Dataset:
    d_f: int
    d_c: int
    images: list[ImageRecord] = field(default_factory=list)
    sessions: list[list[Run]] = field(default_factory=list)

    def __post_init__(self):
        self._index: dict[int, int] | None = None
        self._emb: np.ndarray | None = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.d_f == other.d_f
            and self.d_c == other.d_c
            and self.images == other.images
            and self.sessions == other.sessions
        )

    @property
    def image_index(self) -> dict[int, int]:
        if self._index is None or len(self._index) != len(self.images):
            self._index = {rec.image_id: i for i, rec in enumerate(self.images)}
        return self._index

    def image(self, image_id: int) -> ImageRecord:
        return self.images[self.image_index[int(image_id)]]

    def embedding_matrix(self, image_ids: Sequence[int] | np.ndarray) -> np.ndarray:
        idx = self.image_index
        ids = np.asarray(image_ids)
        rows = [idx[int(i)] for i in ids.reshape(-1)]
        if self._emb is None or self._emb.shape[0] != len(self.images):
            self._emb = (
                np.stack([rec.embedding for rec in self.images])
                if self.images
                else np.empty((0, self.d_c), np.float32)
            )
        return self._emb[rows].reshape(*ids.shape, self.d_c)

    def trials(self) -> Iterator[Trial]:
        for s, runs in enumerate(self.sessions):
            for r, run in enumerate(runs):
                for t in range(len(run)):
                    yield Trial(s, r, t, int(run.image_ids[t]), run.fmri[t])

    @property
    def n_trials(self) -> int:
        return sum(len(run) for runs in self.sessions for run in runs)

    def validate(self) -> None:
        """Raise :class:`ValidationError` on the first broken invariant."""
        seen: set[int] = set()
        for rec in self.images:
            if rec.image_id < 0:
                raise ValidationError(f"image_id {rec.image_id} is negative")
            if rec.image_id in seen:
                raise ValidationError(f"duplicate image_id {rec.image_id}")
            seen.add(rec.image_id)
            if rec.embedding.shape != (self.d_c,):
                raise ValidationError(
                    f"image {rec.image_id}: embedding length {rec.embedding.shape} != d_c={self.d_c}"
                )
            if not 1 <= len(rec.captions) <= 5:
                raise ValidationError(f"image {rec.image_id}: needs 1..5 captions, has {len(rec.captions)}")
            if any(not c.strip() for c in rec.captions):
                raise ValidationError(f"image {rec.image_id}: empty caption")
        for s, runs in enumerate(self.sessions):
            for r, run in enumerate(runs):
                if run.fmri.shape != (len(run), self.d_f):
                    raise ValidationError(
                        f"session {s} run {r}: fmri shape {run.fmri.shape} != ({len(run)}, {self.d_f})"
                    )
                for t, iid in enumerate(run.image_ids):
                    if int(iid) not in seen:
                        raise ValidationError(
                            f"trial (session={s}, run={r}, trial={t}) references unknown image_id {int(iid)}"
                        )


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    a = np.asarray(a)
    b = np.asarray(b)
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


# -- windows ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WindowSample:
    anchor: tuple[int, int, int]
    fmri_t: np.ndarray
    fmri_prev: np.ndarray
    target_image_ids: tuple[int, ...]  # ordered [t, t-1, t-2]
    target_embeddings: np.ndarray  # (3, d_c), same order


def build_windows(dataset: Dataset, window: int = 3) -> list[WindowSample]:
    """One sample per trial whose whole window lies inside its run."""
    if window < 2:
        raise ValueError(f"window must be >= 2 (previous signal is required), got {window}")
    dataset.validate()
    out: list[WindowSample] = []
    for s, runs in enumerate(dataset.sessions):
        for r, run in enumerate(runs):
            if len(run) < window:
                continue
            emb = dataset.embedding_matrix(run.image_ids)
            for t in range(window - 1, len(run)):
                ids = tuple(int(run.image_ids[t - i]) for i in range(window))
                out.append(
                    WindowSample(
                        anchor=(s, r, t),
                        fmri_t=run.fmri[t],
                        fmri_prev=run.fmri[t - 1],
                        target_image_ids=ids,
                        target_embeddings=emb[[t - i for i in range(window)]],
                    )
                )
    return out


# -- splitting --------------------------------------------------------------


@dataclass(frozen=True)
class SplitConfig:
    m: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.m <= 0:
            raise ConfigError(f"m must be positive, got {self.m}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


def split_contamination_free(
    windows: Sequence[WindowSample], cfg: SplitConfig
) -> tuple[list[WindowSample], list[WindowSample]]:
    """Draw ``cfg.m`` test windows, then keep only train windows with no marked image.

    Both outputs are ordered by anchor. The draw is a seeded Fisher-Yates
    shuffle over the anchor-sorted windows, so the result does not depend on
    the input order.
    """
    if not windows:
        raise ValueError("no windows to split")
    if cfg.m >= len(windows):
        raise ValueError(f"m={cfg.m} must be smaller than the number of windows ({len(windows)})")
    ordered = sorted(windows, key=lambda w: w.anchor)
    perm = Pcg32.stream(cfg.seed, "split").permutation(len(ordered))
    test_idx = np.sort(perm[: cfg.m])
    is_test = np.zeros(len(ordered), dtype=bool)
    is_test[test_idx] = True
    test = [ordered[i] for i in test_idx]
    marked = {iid for w in test for iid in w.target_image_ids}
    train = [
        w
        for i, w in enumerate(ordered)
        if not is_test[i] and not marked.intersection(w.target_image_ids)
    ]
    if not train:
        raise OverContaminatedSplitError(
            f"over-contaminated split: every remaining window touches one of the "
            f"{len(marked)} images marked by the {cfg.m} test windows"
        )
    return train, test


def carve_validation(
    train: Sequence[WindowSample], m: int, seed: int
) -> tuple[list[WindowSample], list[WindowSample]]:
    """Randomly move ``m`` windows from train to a validation set (no marking)."""
    if m >= len(train):
        raise OverContaminatedSplitError(
            f"validation size {m} leaves no training data (train has {len(train)} windows)"
        )
    perm = Pcg32.stream(seed, "validation").permutation(len(train))
    val_idx = set(int(i) for i in perm[:m])
    val = [w for i, w in enumerate(train) if i in val_idx]
    rest = [w for i, w in enumerate(train) if i not in val_idx]
    return rest, val


def image_ids_of(windows: Sequence[WindowSample]) -> set[int]:
    return {iid for w in windows for iid in w.target_image_ids}


# -- MDST I/O ---------------------------------------------------------------


def dataset_to_bytes(dataset: Dataset) -> bytes:
    buf = io.BytesIO()
    w = buf.write
    w(MDST_MAGIC)
    w(struct.pack("<III", MDST_VERSION, dataset.d_f, dataset.d_c))
    w(struct.pack("<QQ", len(dataset.images), len(dataset.sessions)))
    for rec in dataset.images:
        w(struct.pack("<Q", rec.image_id))
        w(np.ascontiguousarray(rec.embedding, dtype="<f4").tobytes())
        w(struct.pack("<H", len(rec.captions)))
        for cap in rec.captions:
            raw = cap.encode("utf-8")
            w(struct.pack("<I", len(raw)))
            w(raw)
    for runs in dataset.sessions:
        w(struct.pack("<I", len(runs)))
        for run in runs:
            w(struct.pack("<I", len(run)))
            # interleave id and vector per trial
            rec_dtype = np.dtype([("id", "<u8"), ("fmri", "<f4", (dataset.d_f,))])
            block = np.empty(len(run), dtype=rec_dtype)
            block["id"] = run.image_ids
            block["fmri"] = run.fmri
            w(block.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(
                f"truncated MDST payload while reading {what} at byte {self.pos} "
                f"(need {n}, have {len(self.data) - self.pos})"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def dataset_from_bytes(data: bytes) -> Dataset:
    rd = _Reader(data)
    magic = bytes(rd.take(4, "magic")) if len(data) >= 4 else bytes(data)
    if magic != MDST_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MDST_MAGIC!r}")
    (version,) = rd.unpack("<I", "version")
    if version != MDST_VERSION:
        raise VersionMismatchError(f"MDST version {version} not supported (expected {MDST_VERSION})")
    d_f, d_c = rd.unpack("<II", "dims")
    n_images, n_sessions = rd.unpack("<QQ", "counts")
    images = []
    for i in range(n_images):
        (image_id,) = rd.unpack("<Q", f"image {i} id")
        emb = np.frombuffer(rd.take(4 * d_c, f"image {image_id} embedding"), dtype="<f4").astype(np.float32)
        (n_caps,) = rd.unpack("<H", f"image {image_id} caption count")
        caps = []
        for c in range(n_caps):
            (length,) = rd.unpack("<I", f"image {image_id} caption {c} length")
            raw = bytes(rd.take(length, f"image {image_id} caption {c}"))
            try:
                caps.append(raw.decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise CaptionEncodingError(f"image {image_id} caption {c} is not valid UTF-8: {exc}") from None
        images.append(ImageRecord(int(image_id), emb, tuple(caps)))
    rec_dtype = np.dtype([("id", "<u8"), ("fmri", "<f4", (d_f,))])
    sessions = []
    for s in range(n_sessions):
        (n_runs,) = rd.unpack("<I", f"session {s} run count")
        runs = []
        for r in range(n_runs):
            (n_trials,) = rd.unpack("<I", f"session {s} run {r} trial count")
            raw = rd.take(rec_dtype.itemsize * n_trials, f"session {s} run {r} trials")
            block = np.frombuffer(raw, dtype=rec_dtype)
            runs.append(Run(block["id"].astype(np.int64), block["fmri"].astype(np.float32).reshape(n_trials, d_f)))
        sessions.append(runs)
    if rd.pos != len(data):
        raise FormatError(f"{len(data) - rd.pos} trailing bytes after MDST payload")
    return Dataset(d_f=d_f, d_c=d_c, images=images, sessions=sessions)


def save_dataset(dataset: Dataset, path: str | Path) -> str:
    """Write the MDST file and return its SHA-256 hex digest."""
    data = dataset_to_bytes(dataset)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path: str | Path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
