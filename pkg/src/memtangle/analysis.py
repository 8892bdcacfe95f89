"""Retention analyses: offset ridge regression and trial-wise RSA."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ._backend import kernels
from .core import Dataset, SplitConfig
from .errors import DegenerateInputError, EmptyPairSetError, NumericError
from .rng import Pcg32

log = logging.getLogger(__name__)


# -- Pearson ----------------------------------------------------------------


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise ValueError("pearson needs at least 2 elements")
    da = a - a.mean()
    db = b - b.mean()
    saa = float(da @ da)
    sbb = float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        raise DegenerateInputError("pearson: constant input vector")
    r = float(da @ db) / np.sqrt(saa * sbb)
    return float(min(1.0, max(-1.0, r)))


def rowwise_pearson(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pearson between matching rows of two equally shaped matrices."""
    da = a - a.mean(axis=1, keepdims=True)
    db = b - b.mean(axis=1, keepdims=True)
    saa = np.einsum("ij,ij->i", da, da)
    sbb = np.einsum("ij,ij->i", db, db)
    bad = np.flatnonzero((saa == 0) | (sbb == 0))
    if bad.size:
        raise DegenerateInputError(f"pearson: constant row at index {int(bad[0])}")
    return np.clip(np.einsum("ij,ij->i", da, db) / np.sqrt(saa * sbb), -1.0, 1.0)


# -- ridge ------------------------------------------------------------------


@dataclass(frozen=True)
class RidgeConfig:
    lam: float = 1.0
    max_k: int = 9

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.max_k < 0:
            raise ValueError(f"max_k must be >= 0, got {self.max_k}")


@dataclass
class RidgeModel:
    W: np.ndarray  # (p, q)
    bias: np.ndarray  # (q,)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.W + self.bias


def _solve_spd(M: np.ndarray, R: np.ndarray, what: str) -> np.ndarray:
    try:
        return scipy.linalg.solve(M, R, assume_a="pos", check_finite=True)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        cond = np.linalg.cond(M)
        raise NumericError(f"{what} system is singular (condition number {cond:.3e}): {exc}") from None


def ridge_fit(X, Y, lam: float, form: str = "auto") -> RidgeModel:
    """Closed-form ridge with an unpenalised bias.

    ``form="auto"`` uses the primal normal equations when p <= n and the dual
    (kernel) form otherwise; either can be forced for cross-checking.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, p = X.shape
    if n < 2:
        raise ValueError(f"ridge_fit needs n >= 2 samples, got {n}")
    if Y.shape[0] != n:
        raise ValueError(f"X has {n} rows but Y has {Y.shape[0]}")
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    Yc = Y - y_mean
    if form == "auto":
        form = "primal" if p <= n else "dual"
    if form == "primal":
        G = Xc.T @ Xc
        G[np.diag_indices_from(G)] += lam
        W = _solve_spd(G, Xc.T @ Yc, "primal ridge")
    elif form == "dual":
        K = Xc @ Xc.T
        K[np.diag_indices_from(K)] += lam
        W = Xc.T @ _solve_spd(K, Yc, "dual ridge")
    else:
        raise ValueError(f"unknown ridge form {form!r}")
    if not np.all(np.isfinite(W)):
        raise NumericError("ridge solution has non-finite entries")
    return RidgeModel(W=W, bias=y_mean - x_mean @ W)


# -- offset pairing ---------------------------------------------------------


@dataclass
class _Flat:
    fmri: np.ndarray  # (N, d_f) float32
    image_ids: np.ndarray  # (N,)
    pos: np.ndarray  # trial index within run
    run_start: np.ndarray  # flat index of the run's first trial


def _flatten(dataset: Dataset) -> _Flat:
    fmri, ids, pos, start = [], [], [], []
    offset = 0
    for runs in dataset.sessions:
        for run in runs:
            n = len(run)
            fmri.append(run.fmri)
            ids.append(run.image_ids)
            pos.append(np.arange(n))
            start.append(np.full(n, offset))
            offset += n
    if not fmri:
        raise EmptyPairSetError("dataset has no trials")
    return _Flat(np.concatenate(fmri), np.concatenate(ids), np.concatenate(pos), np.concatenate(start))


def _test_trials(flat: _Flat, split: SplitConfig) -> np.ndarray:
    n = flat.image_ids.shape[0]
    if split.m >= n:
        raise ValueError(f"m={split.m} must be smaller than the number of trials ({n})")
    perm = Pcg32.stream(split.seed, "split").permutation(n)
    mask = np.zeros(n, dtype=bool)
    mask[perm[: split.m]] = True
    return mask


def _fit_and_score(flat, emb, train_rows, train_targets, test_rows, test_targets, lam):
    model = ridge_fit(flat.fmri[train_rows], emb[train_targets], lam)
    pred = model.predict(flat.fmri[test_rows])
    return float(rowwise_pearson(pred, emb[test_targets].astype(np.float64)).mean())


def _pairs_for_offset(flat: _Flat, is_test: np.ndarray, k: int, lam: float, emb, row_of) -> float:
    valid = flat.pos >= k
    t_idx = np.flatnonzero(valid)
    src = t_idx - k
    sig_img = flat.image_ids[t_idx]
    tgt_img = flat.image_ids[src]
    test_sel = is_test[t_idx]
    if not test_sel.any():
        raise EmptyPairSetError(f"no test pairs for offset k={k}")
    marked = np.union1d(sig_img[test_sel], tgt_img[test_sel])
    clean = ~np.isin(sig_img, marked) & ~np.isin(tgt_img, marked)
    train_sel = ~test_sel & clean
    if train_sel.sum() < 2:
        raise EmptyPairSetError(f"fewer than 2 training pairs for offset k={k}")
    return _fit_and_score(
        flat, emb,
        t_idx[train_sel], row_of(tgt_img[train_sel]),
        t_idx[test_sel], row_of(tgt_img[test_sel]),
        lam,
    )


def _embedding_lookup(dataset: Dataset):
    emb = np.stack([rec.embedding for rec in dataset.images])
    index = dataset.image_index
    lut = np.full(max(index) + 1, -1, dtype=np.int64)
    for iid, row in index.items():
        lut[iid] = row
    return emb, (lambda ids: lut[ids])


def ridge_offset_analysis(dataset: Dataset, cfg: RidgeConfig, split: SplitConfig) -> list[tuple[int, float]]:
    """Mean test Pearson between ridge predictions from F_t and C_{t-k}, for k = 0..max_k.

    One trial-level test draw is shared by every offset. A pair joins the
    training set only when neither its signal image nor its target image
    appears in a test pair of the same offset.
    """
    flat = _flatten(dataset)
    is_test = _test_trials(flat, split)
    emb, row_of = _embedding_lookup(dataset)
    return [(k, _pairs_for_offset(flat, is_test, k, cfg.lam, emb, row_of)) for k in range(cfg.max_k + 1)]


def ridge_random_baseline(dataset: Dataset, cfg: RidgeConfig, split: SplitConfig) -> float:
    """Same pipeline with each signal paired to the embedding of a randomly permuted trial."""
    flat = _flatten(dataset)
    is_test = _test_trials(flat, split)
    emb, row_of = _embedding_lookup(dataset)
    n = flat.image_ids.shape[0]
    perm = Pcg32.stream(split.seed, "baseline").permutation(n)
    sig_img = flat.image_ids
    tgt_img = flat.image_ids[perm]
    marked = np.union1d(sig_img[is_test], tgt_img[is_test])
    clean = ~np.isin(sig_img, marked) & ~np.isin(tgt_img, marked)
    train_sel = ~is_test & clean
    if train_sel.sum() < 2:
        raise EmptyPairSetError("fewer than 2 training pairs for the random baseline")
    rows = np.arange(n)
    return _fit_and_score(
        flat, emb,
        rows[train_sel], row_of(tgt_img[train_sel]),
        rows[is_test], row_of(tgt_img[is_test]),
        cfg.lam,
    )


# -- RDM / RSA --------------------------------------------------------------


@dataclass
class Rdm:
    values: np.ndarray

    @property
    def n(self) -> int:
        return int(self.values.shape[0])


@dataclass
class RsaResult:
    ks: list[int]
    per_k: list[float]
    per_session: list[tuple[int, int, float]] = field(default_factory=list)


def compute_rdm(vectors) -> Rdm:
    """Dissimilarity ``1 - pearson`` between every pair of vectors."""
    V = np.asarray(vectors, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] < 2:
        raise ValueError("compute_rdm needs at least 2 vectors of equal length")
    D = V - V.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", D, D))
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise DegenerateInputError(f"compute_rdm: vector {int(bad[0])} is constant")
    Z = D / norms[:, None]
    R = Z @ Z.T
    R = (R + R.T) * 0.5
    np.clip(R, -1.0, 1.0, out=R)
    out = 1.0 - R
    np.fill_diagonal(out, 0.0)
    return Rdm(out)


def trialwise_rsa(rdm_f: Rdm, rdm_c: Rdm, k: int) -> float:
    """Mean over t of pearson(row t of RDM_c, row t+k of RDM_f), self-cells excluded."""
    n = rdm_c.n
    if rdm_f.n != n:
        raise ValueError(f"RDM sizes differ: {rdm_f.n} vs {n}")
    if k < 0 or k >= n - 1:
        raise ValueError(f"offset k={k} too large for RDMs of size {n}")
    rows = np.empty(n - k, dtype=np.float64)
    bad = kernels.trialwise_rows(
        np.ascontiguousarray(rdm_c.values, dtype=np.float64),
        np.ascontiguousarray(rdm_f.values, dtype=np.float64),
        k,
        rows,
    )
    if bad:
        t = int(np.flatnonzero(np.isnan(rows))[0])
        raise DegenerateInputError(f"trialwise_rsa: constant row pair at t={t}, k={k}")
    return float(rows.sum() / rows.shape[0])


def _session_sequences(dataset: Dataset, s: int) -> tuple[np.ndarray, np.ndarray]:
    runs = dataset.sessions[s]
    if not runs:
        return np.empty((0, dataset.d_f)), np.empty((0, dataset.d_c))
    F = np.concatenate([run.fmri for run in runs])
    ids = np.concatenate([run.image_ids for run in runs])
    return F, dataset.embedding_matrix(ids)


def _rsa(dataset: Dataset, ks: list[int], auto: bool) -> RsaResult:
    max_k = max(ks)
    per_session = []
    sums = np.zeros(len(ks))
    used = 0
    for s in range(len(dataset.sessions)):
        F, C = _session_sequences(dataset, s)
        if F.shape[0] < max_k + 2:
            log.warning("session %d skipped: %d trials < max_k + 2 = %d", s, F.shape[0], max_k + 2)
            continue
        rdm_f = compute_rdm(F)
        rdm_c = rdm_f if auto else compute_rdm(C)
        for j, k in enumerate(ks):
            rho = trialwise_rsa(rdm_f, rdm_c, k)
            per_session.append((s, k, rho))
            sums[j] += rho
        used += 1
    if not used:
        raise EmptyPairSetError(f"every session is shorter than max_k + 2 = {max_k + 2} trials")
    return RsaResult(ks=list(ks), per_k=[float(v) for v in sums / used], per_session=per_session)


def rsa_over_sessions(dataset: Dataset, max_k: int) -> RsaResult:
    return _rsa(dataset, list(range(max_k + 1)), auto=False)


def fmri_auto_rsa(dataset: Dataset, max_k: int) -> RsaResult:
    """Signal-vs-signal trial-wise RSA; k starts at 1 since k = 0 is trivially 1."""
    if max_k < 1:
        raise ValueError("fmri_auto_rsa needs max_k >= 1")
    return _rsa(dataset, list(range(1, max_k + 1)), auto=True)
