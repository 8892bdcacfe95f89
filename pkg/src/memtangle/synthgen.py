"""NSD-shaped synthetic datasets with a known memory-decay mixture.

Signals follow ``F_t = A (sum_k w_k C_{t-k}) + eps_t`` inside each run, with
memory reset at run boundaries. Stimulus embeddings are i.i.d. Gaussian
vectors normalised to unit length. Captions are read off the embedding: each
slot of the template ``a {adjective} {noun} {verb phrase} {location}`` picks
the word whose random prototype has the largest projection on the
embedding, so nearby embeddings tend to share words.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import Dataset, ImageRecord, Run
from .errors import ConfigError
from .rng import Pcg32

ADJECTIVES = (
    "red", "small", "large", "white", "black", "young",
    "old", "brown", "wooden", "striped", "shiny", "fluffy",
)
NOUNS = (
    "dog", "cat", "man", "woman", "horse", "giraffe", "elephant", "bus",
    "train", "bicycle", "bird", "cow", "boat", "child", "truck", "zebra",
)
VERB_PHRASES = (
    "standing near", "walking along", "sitting beside", "running across",
    "parked next to", "resting under", "looking at", "waiting by",
    "moving toward", "lying on",
)
LOCATIONS = (
    "a busy street", "the green field", "a sandy beach", "a snowy hill",
    "the old building", "a wooden fence", "the city park", "a quiet river",
    "the kitchen table", "a large tree",
)
SLOTS = (ADJECTIVES, NOUNS, VERB_PHRASES, LOCATIONS)
_TOP = 3  # ranked alternatives per slot tried before a full enumeration


@dataclass
class GenConfig:
    n_images: int
    n_sessions: int
    d_f: int = 2048
    d_c: int = 512
    runs_per_session: int = 12
    trials_per_run: int = 62
    repeats: int = 3
    decay_weights: list[float] = field(default_factory=lambda: [1.0, 0.6, 0.3, 0.1])
    noise_sigma: float = 0.5
    captions_per_image: int = 1
    seed: int = 0

    def __post_init__(self):
        self.decay_weights = [float(w) for w in self.decay_weights]
        self.noise_sigma = float(self.noise_sigma)

    @property
    def n_slots(self) -> int:
        return self.n_sessions * self.runs_per_session * self.trials_per_run

    def validate(self) -> None:
        for name in ("n_images", "d_f", "d_c", "n_sessions", "runs_per_session", "trials_per_run", "repeats"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not 1 <= self.captions_per_image <= 5:
            raise ConfigError(f"captions_per_image must be in 1..5, got {self.captions_per_image}")
        if not self.decay_weights:
            raise ConfigError("decay_weights must not be empty")
        if any(w < 0 for w in self.decay_weights):
            raise ConfigError(f"decay_weights must be non-negative, got {self.decay_weights}")
        if self.decay_weights[0] <= 0:
            raise ConfigError(f"decay_weights[0] must be > 0, got {self.decay_weights[0]}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.repeats * self.n_images != self.n_slots:
            raise ConfigError(
                f"fill constraint violated: repeats * n_images = {self.repeats} * {self.n_images} = "
                f"{self.repeats * self.n_images} != n_sessions * runs_per_session * trials_per_run = "
                f"{self.n_sessions} * {self.runs_per_session} * {self.trials_per_run} = {self.n_slots}"
            )
        n_combos = int(np.prod([len(s) for s in SLOTS]))
        if self.n_images > n_combos:
            raise ConfigError(f"n_images={self.n_images} exceeds the {n_combos} distinct captions available")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown GenConfig field(s): {', '.join(unknown)}")
        missing = [n for n in ("n_images", "n_sessions") if n not in data]
        if missing:
            raise ConfigError(f"missing GenConfig field(s): {', '.join(missing)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid GenConfig: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "GenConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def nsd_like(cls, n_sessions: int, **overrides) -> "GenConfig":
        """Defaults everywhere, with n_images chosen to exactly fill the schedule."""
        runs = overrides.get("runs_per_session", 12)
        trials = overrides.get("trials_per_run", 62)
        repeats = overrides.get("repeats", 3)
        slots = n_sessions * runs * trials
        if slots % repeats:
            raise ConfigError(f"{slots} slots cannot be filled with repeats={repeats}")
        return cls(n_images=slots // repeats, n_sessions=n_sessions, **overrides)


@dataclass
class MixingModel:
    A: np.ndarray  # (d_f, d_c)
    decay_weights: list[float]
    noise_sigma: float


def make_mixing(cfg: GenConfig) -> MixingModel:
    a = Pcg32.stream(cfg.seed, "mixing").normal(cfg.d_f * cfg.d_c).reshape(cfg.d_f, cfg.d_c)
    return MixingModel(a / np.sqrt(cfg.d_c), list(cfg.decay_weights), cfg.noise_sigma)


def _caption(choice: tuple[int, ...]) -> str:
    adj, noun, verb, loc = (slot[i] for slot, i in zip(SLOTS, choice))
    return f"a {adj} {noun} {verb} {loc}"


def gen_concepts(cfg: GenConfig) -> list[ImageRecord]:
    cfg.validate()
    emb = Pcg32.stream(cfg.seed, "concepts").normal(cfg.n_images * cfg.d_c).reshape(cfg.n_images, cfg.d_c)
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    emb32 = emb.astype(np.float32)

    proto_rng = Pcg32.stream(cfg.seed, "captions")
    prototypes = [proto_rng.normal(len(slot) * cfg.d_c).reshape(len(slot), cfg.d_c) for slot in SLOTS]

    used: set[tuple[int, ...]] = set()
    records = []
    for i in range(cfg.n_images):
        e = emb32[i].astype(np.float64)
        scores = [p @ e for p in prototypes]
        ranked = [np.argsort(-s, kind="stable") for s in scores]

        def total(combo):
            return sum(scores[j][c] for j, c in enumerate(combo))

        local = itertools.product(*(r[:_TOP] for r in ranked))
        candidates = sorted(local, key=lambda c: -total(c))
        unique = next((c for c in candidates if tuple(int(x) for x in c) not in used), None)
        if unique is None:
            everything = sorted(itertools.product(*(range(len(s)) for s in SLOTS)), key=lambda c: -total(c))
            unique = next(c for c in everything if c not in used)
        unique = tuple(int(x) for x in unique)
        used.add(unique)
        caps = [_caption(unique)]
        for alt in candidates:
            if len(caps) >= cfg.captions_per_image:
                break
            alt = tuple(int(x) for x in alt)
            if alt != unique:
                caps.append(_caption(alt))
        records.append(ImageRecord(image_id=i, embedding=emb32[i], captions=tuple(caps)))
    return records


def gen_schedule(cfg: GenConfig) -> np.ndarray:
    """Image id per slot, shaped (n_sessions, runs_per_session, trials_per_run)."""
    cfg.validate()
    multiset = np.repeat(np.arange(cfg.n_images, dtype=np.int64), cfg.repeats)
    Pcg32.stream(cfg.seed, "schedule").shuffle(multiset)
    return multiset.reshape(cfg.n_sessions, cfg.runs_per_session, cfg.trials_per_run)


def gen_signals(schedule: np.ndarray, concepts: list[ImageRecord], model: MixingModel, seed: int) -> Dataset:
    d_f, d_c = model.A.shape
    emb = np.stack([rec.embedding for rec in concepts]).astype(np.float64)
    index = {rec.image_id: i for i, rec in enumerate(concepts)}
    noise = Pcg32.stream(seed, "noise")
    weights = np.asarray(model.decay_weights, dtype=np.float64)
    sessions = []
    for s in range(schedule.shape[0]):
        runs = []
        for r in range(schedule.shape[1]):
            ids = schedule[s, r]
            n = ids.shape[0]
            c = emb[[index[int(i)] for i in ids]]
            mix = np.zeros((n, d_c))
            for k, w in enumerate(weights):
                if k >= n:
                    break
                if w != 0.0:
                    mix[k:] += w * c[: n - k]
            f = mix @ model.A.T
            if model.noise_sigma > 0:
                f += model.noise_sigma * noise.normal(n * d_f).reshape(n, d_f)
            runs.append(Run(ids.copy(), f.astype(np.float32)))
        sessions.append(runs)
    return Dataset(d_f=d_f, d_c=d_c, images=list(concepts), sessions=sessions)


def generate(cfg: GenConfig) -> Dataset:
    cfg.validate()
    concepts = gen_concepts(cfg)
    schedule = gen_schedule(cfg)
    return gen_signals(schedule, concepts, make_mixing(cfg), cfg.seed)


def expected_retention_curve(cfg: GenConfig, max_k: int) -> list[float]:
    w = list(cfg.decay_weights[: max_k + 1])
    return w + [0.0] * (max_k + 1 - len(w))
