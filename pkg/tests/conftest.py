from __future__ import annotations

import numpy as np
import pytest

from memtangle.core import Dataset, ImageRecord, Run
from memtangle.synthgen import GenConfig, generate


def make_dataset(run_ids, d_f=4, d_c=3, seed=0, captions=None):
    """Hand-built dataset: ``run_ids`` is a list of sessions, each a list of image-id lists."""
    rng = np.random.default_rng(seed)
    ids = sorted({i for session in run_ids for run in session for i in run})
    images = []
    for i in ids:
        emb = rng.normal(size=d_c).astype(np.float32)
        caps = captions[i] if captions else (f"image number {i}",)
        images.append(ImageRecord(i, emb, tuple(caps)))
    sessions = [
        [Run(np.array(run, dtype=np.int64), rng.normal(size=(len(run), d_f)).astype(np.float32)) for run in session]
        for session in run_ids
    ]
    return Dataset(d_f=d_f, d_c=d_c, images=images, sessions=sessions)


@pytest.fixture(scope="session")
def small_cfg() -> GenConfig:
    # 2 sessions x 4 runs x 30 trials = 240 slots = 3 x 80 images
    return GenConfig(n_images=80, n_sessions=2, d_f=24, d_c=8, runs_per_session=4, trials_per_run=30, seed=5)


@pytest.fixture(scope="session")
def small_ds(small_cfg):
    return generate(small_cfg)


@pytest.fixture(scope="session")
def nsd40():
    """The full-size default generator with 40 NSD-like sessions, seed 1."""
    return generate(GenConfig.nsd_like(40, seed=1))
