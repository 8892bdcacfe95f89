from __future__ import annotations

import functools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memtangle.core import (
    Dataset,
    ImageRecord,
    Run,
    SplitConfig,
    build_windows,
    carve_validation,
    dataset_from_bytes,
    dataset_to_bytes,
    file_sha256,
    image_ids_of,
    load_dataset,
    save_dataset,
    split_contamination_free,
)
from memtangle.errors import (
    BadMagicError,
    CaptionEncodingError,
    ConfigError,
    FormatError,
    OverContaminatedSplitError,
    TruncatedPayloadError,
    ValidationError,
    VersionMismatchError,
)
from memtangle.synthgen import GenConfig, generate

from conftest import make_dataset


# -- windows ----------------------------------------------------------------


def test_one_run_of_five_gives_three_windows():
    ds = make_dataset([[[0, 1, 2, 3, 4]]])
    wins = build_windows(ds)
    assert [w.anchor for w in wins] == [(0, 0, 2), (0, 0, 3), (0, 0, 4)]


def test_short_runs_give_no_windows():
    ds = make_dataset([[[0, 1], [2, 3]]])
    assert build_windows(ds) == []


def test_nsd_sized_run_gives_sixty_windows():
    ds = make_dataset([[list(range(62))]])
    assert len(build_windows(ds)) == 60


def test_window_contents():
    ds = make_dataset([[[5, 6, 7, 8]]])
    w = build_windows(ds)[1]  # anchor trial 3
    run = ds.sessions[0][0]
    assert w.target_image_ids == (8, 7, 6)
    assert np.array_equal(w.fmri_t, run.fmri[3])
    assert np.array_equal(w.fmri_prev, run.fmri[2])
    for emb, iid in zip(w.target_embeddings, w.target_image_ids):
        assert np.array_equal(emb, ds.image(iid).embedding)


def test_dangling_image_id_names_the_trial():
    ds = make_dataset([[[0, 1, 2]]])
    ds.sessions[0][0].image_ids[1] = 99
    with pytest.raises(ValidationError, match=r"session=0, run=0, trial=1"):
        build_windows(ds)


def test_window_size_below_two_rejected():
    with pytest.raises(ValueError):
        build_windows(make_dataset([[[0, 1, 2]]]), window=1)


def test_windows_never_cross_runs(small_ds):
    for w in build_windows(small_ds):
        s, r, t = w.anchor
        run = small_ds.sessions[s][r]
        assert t >= 2
        assert w.target_image_ids == tuple(int(run.image_ids[t - i]) for i in range(3))


# -- splitting --------------------------------------------------------------


def test_disjoint_images_no_extra_discard():
    # one 3-trial run per window keeps every window's images to itself
    sessions = [[[3 * i, 3 * i + 1, 3 * i + 2] for i in range(10)]]
    ds = make_dataset(sessions)
    wins = build_windows(ds)
    assert len(wins) == 10
    train, test = split_contamination_free(wins, SplitConfig(m=2, seed=0))
    assert len(test) == 2 and len(train) == 8


def test_full_overlap_is_over_contaminated():
    ds = make_dataset([[[0, 0, 0, 0, 0, 0]]])
    with pytest.raises(OverContaminatedSplitError, match="over-contaminated split"):
        split_contamination_free(build_windows(ds), SplitConfig(m=1, seed=0))


def test_m_must_be_smaller_than_window_count():
    wins = build_windows(make_dataset([[[0, 1, 2, 3]]]))
    with pytest.raises(ValueError):
        split_contamination_free(wins, SplitConfig(m=2, seed=0))
    with pytest.raises(ConfigError):
        SplitConfig(m=0)


def test_split_on_repeated_images(nsd40):
    wins = build_windows(nsd40)
    train, test = split_contamination_free(wins, SplitConfig(m=500, seed=1))
    assert len(test) == 500
    assert len(train) < len(wins) - 500
    # independent overlap count
    test_ids = set()
    for w in test:
        test_ids.update(w.target_image_ids)
    overlap = sum(1 for w in train for i in w.target_image_ids if i in test_ids)
    assert overlap == 0


def test_split_independent_of_input_order(small_ds):
    wins = build_windows(small_ds)
    a = split_contamination_free(wins, SplitConfig(m=5, seed=3))
    b = split_contamination_free(list(reversed(wins)), SplitConfig(m=5, seed=3))
    assert [w.anchor for w in a[0]] == [w.anchor for w in b[0]]
    assert [w.anchor for w in a[1]] == [w.anchor for w in b[1]]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**64 - 1))
def test_split_never_leaks(seed):
    wins = _small_windows()
    train, test = split_contamination_free(wins, SplitConfig(m=4, seed=seed))
    assert image_ids_of(train).isdisjoint(image_ids_of(test))
    assert len(test) == 4
    assert len({w.anchor for w in test}) == 4


@functools.lru_cache(maxsize=1)
def _small_windows():
    cfg = GenConfig(n_images=80, n_sessions=2, d_f=24, d_c=8, runs_per_session=4, trials_per_run=30, seed=5)
    return build_windows(generate(cfg))


def test_carve_validation(small_ds):
    wins = build_windows(small_ds)
    train, _ = split_contamination_free(wins, SplitConfig(m=3, seed=1))
    rest, val = carve_validation(train, 4, seed=1)
    assert len(val) == 4 and len(rest) == len(train) - 4
    assert {w.anchor for w in rest}.isdisjoint({w.anchor for w in val})
    again = carve_validation(train, 4, seed=1)
    assert [w.anchor for w in again[1]] == [w.anchor for w in val]
    with pytest.raises(OverContaminatedSplitError):
        carve_validation(train, len(train), seed=1)


# -- MDST -------------------------------------------------------------------


def _manual_bytes(ds: Dataset) -> bytes:
    """Byte layout written out field by field."""
    out = b"MDST" + struct.pack("<I", 1) + struct.pack("<I", ds.d_f) + struct.pack("<I", ds.d_c)
    out += struct.pack("<Q", len(ds.images)) + struct.pack("<Q", len(ds.sessions))
    for rec in ds.images:
        out += struct.pack("<Q", rec.image_id)
        out += b"".join(struct.pack("<f", float(x)) for x in rec.embedding)
        out += struct.pack("<H", len(rec.captions))
        for c in rec.captions:
            raw = c.encode("utf-8")
            out += struct.pack("<I", len(raw)) + raw
    for runs in ds.sessions:
        out += struct.pack("<I", len(runs))
        for run in runs:
            out += struct.pack("<I", len(run))
            for t in range(len(run)):
                out += struct.pack("<Q", int(run.image_ids[t]))
                out += b"".join(struct.pack("<f", float(x)) for x in run.fmri[t])
    return out


def test_empty_dataset_round_trip(tmp_path):
    ds = Dataset(d_f=4, d_c=2)
    save_dataset(ds, tmp_path / "e.mdst")
    assert load_dataset(tmp_path / "e.mdst") == ds


def test_single_trial_round_trip_and_layout(tmp_path):
    ds = make_dataset([[[3]]], d_f=5, d_c=2, captions={3: ("un café ☕", "second")})
    raw = dataset_to_bytes(ds)
    assert raw == _manual_bytes(ds)
    back = dataset_from_bytes(raw)
    assert back == ds
    assert back.sessions[0][0].fmri.tobytes() == ds.sessions[0][0].fmri.tobytes()
    assert back.images[0].captions == ("un café ☕", "second")


def test_generated_round_trip_and_stable_hash(tmp_path):
    ds = generate(GenConfig(n_images=80, n_sessions=2, d_f=24, d_c=8, runs_per_session=4, trials_per_run=30, seed=7))
    h1 = save_dataset(ds, tmp_path / "a.mdst")
    h2 = save_dataset(ds, tmp_path / "b.mdst")
    assert h1 == h2 == file_sha256(tmp_path / "a.mdst")
    assert load_dataset(tmp_path / "a.mdst") == ds
    assert not (tmp_path / "a.mdst.tmp").exists()


def test_format_errors_are_distinct():
    raw = dataset_to_bytes(make_dataset([[[0, 1]]]))
    with pytest.raises(BadMagicError):
        dataset_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(VersionMismatchError):
        dataset_from_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(TruncatedPayloadError):
        dataset_from_bytes(raw[:-3])
    with pytest.raises(FormatError):
        dataset_from_bytes(raw + b"\0")
    with pytest.raises(BadMagicError):
        dataset_from_bytes(b"MD")


def test_bad_utf8_caption():
    ds = make_dataset([[[0]]], captions={0: ("abc",)})
    raw = dataset_to_bytes(ds)
    i = raw.index(b"abc")
    with pytest.raises(CaptionEncodingError):
        dataset_from_bytes(raw[:i] + b"\xff\xfe\xfd" + raw[i + 3 :])


def test_validation_rules():
    ds = make_dataset([[[0, 1]]])
    ds.images[0] = ImageRecord(0, np.zeros(5, np.float32), ("x",))
    with pytest.raises(ValidationError, match="d_c"):
        ds.validate()
    ds = make_dataset([[[0]]])
    ds.images[0] = ImageRecord(0, ds.images[0].embedding, ("   ",))
    with pytest.raises(ValidationError, match="empty caption"):
        ds.validate()
    ds = make_dataset([[[0]]])
    ds.sessions[0][0] = Run(np.array([0]), np.zeros((1, 7)))
    with pytest.raises(ValidationError, match="fmri shape"):
        ds.validate()
