"""Caption metrics and the per-offset ablation report.

CIDEr follows the original consensus formulation: n-grams of order 1..4,
raw term counts weighted by ``ln(N / max(1, df))`` where ``df`` counts the
reference sets containing the n-gram, a clipped cosine per reference
(candidate weights capped by the reference weights in the dot product, norms
left unclipped), averaged over references, then over n, times 10. No
length penalty.

METEOR-lite is an exact-match METEOR: greedy one-to-one alignment, harmonic
mean ``10PR / (R + 9P)`` and fragmentation penalty ``0.5 (chunks / m)^3``.
"""
from __future__ import annotations

import csv
import math
import re
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import IncompleteInputError, ValidationError

MAX_N = 4
KS = (0, 1, 2)
METRICS = ("cider", "meteor", "top1")
_SPLIT = re.compile(r"[\W_]+", re.UNICODE)


def tokenize(s: str) -> list[str]:
    return [t for t in _SPLIT.split(s.lower()) if t]


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _counts(tokens: Sequence[str]) -> list[Counter]:
    return [_ngrams(tokens, n) for n in range(1, MAX_N + 1)]


def cider_scores(candidates: Sequence[str], references: Sequence[Sequence[str]]) -> np.ndarray:
    """Per-item CIDEr scores."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    n_docs = len(references)
    if n_docs < 2:
        raise ValueError(f"CIDEr needs at least 2 items to define document frequencies, got {n_docs}")
    if any(len(refs) == 0 for refs in references):
        raise ValueError("every item needs at least one reference")

    cand_counts = [_counts(tokenize(c)) for c in candidates]
    ref_counts = [[_counts(tokenize(r)) for r in refs] for refs in references]
    df: Counter = Counter()
    for refs in ref_counts:
        present = set()
        for rc in refs:
            for c in rc:
                present.update(c)
        df.update(present)
    log_n = math.log(n_docs)

    def weights(counts: Counter) -> tuple[dict, float]:
        vec = {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in counts.items()}
        return vec, math.sqrt(sum(v * v for v in vec.values()))

    out = np.zeros(n_docs)
    for i, (cc, refs) in enumerate(zip(cand_counts, ref_counts)):
        if not cc[0]:
            continue
        per_n = np.zeros(MAX_N)
        for n in range(MAX_N):
            cv, cnorm = weights(cc[n])
            for rc in refs:
                rv, rnorm = weights(rc[n])
                if cnorm == 0 or rnorm == 0:
                    continue
                dot = sum(min(w, rv[g]) * rv[g] for g, w in cv.items() if g in rv)
                per_n[n] += dot / (cnorm * rnorm)
            per_n[n] /= len(refs)
        out[i] = 10.0 * per_n.mean()
    return out


def cider(candidates: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    return float(cider_scores(candidates, references).mean())


def _align(cand: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    used = [False] * len(ref)
    pairs = []
    for i, tok in enumerate(cand):
        for j, r in enumerate(ref):
            if not used[j] and r == tok:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def _chunks(pairs: Sequence[tuple[int, int]]) -> int:
    if not pairs:
        return 0
    n = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if i1 != i0 + 1 or j1 != j0 + 1:
            n += 1
    return n


def meteor_lite(candidate: str, refs: Sequence[str]) -> float:
    if not refs:
        raise ValueError("meteor_lite needs at least one reference")
    cand = tokenize(candidate)
    if not cand:
        return 0.0
    best = 0.0
    for ref in refs:
        rt = tokenize(ref)
        pairs = _align(cand, rt)
        m = len(pairs)
        if m == 0:
            continue
        p = m / len(cand)
        r = m / len(rt)
        fmean = 10.0 * p * r / (r + 9.0 * p)
        penalty = 0.5 * (_chunks(pairs) / m) ** 3
        best = max(best, fmean * (1.0 - penalty))
    return best


# -- ablation report --------------------------------------------------------


@dataclass
class MetricReport:
    # (method, alpha, k) -> metric -> (mean, std, n_seeds)
    cells: dict[tuple[str, float | None, int], dict[str, tuple[float, float, int]]]
    seeds: list[int]
    per_seed: dict[tuple[str, float | None, int, int], dict[str, float]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def configs(self) -> list[tuple[str, float | None]]:
        return sorted({(m, a) for m, a, _ in self.cells}, key=_config_key)


def _config_key(cfg: tuple[str, float | None]):
    method, alpha = cfg
    return (0 if method == "sf" else 1, -1.0 if alpha is None else alpha)


def _alpha_of(rec: dict) -> float | None:
    if rec.get("method") == "sf":
        return None
    a = rec.get("alpha")
    return None if a is None else float(a)


def score_cell(records: Sequence[dict]) -> dict[str, float]:
    recs = sorted(records, key=lambda r: tuple(r["anchor"]))
    cands = [r["predicted_caption"] for r in recs]
    refs = [r["true_captions"] for r in recs]
    return {
        "cider": cider(cands, refs),
        "meteor": float(np.mean([meteor_lite(c, rs) for c, rs in zip(cands, refs)])),
        "top1": float(np.mean([r["identified_image_id"] == r["true_image_id"] for r in recs])),
    }


def evaluate_run(records: Iterable[dict], ks: Sequence[int] = KS, expected_seeds: Sequence[int] | None = None) -> MetricReport:
    """Score each (method, alpha, k, seed) cell, then aggregate over seeds.

    Within a seed every k must cover the same test windows, and every
    (method, alpha) configuration must have every (k, seed) cell.
    """
    groups: dict[tuple[str, float | None, int, int], list[dict]] = defaultdict(list)
    for rec in records:
        k = int(rec["k"])
        if k not in ks:
            raise ValidationError(f"record with k={k} outside {list(ks)}")
        groups[(rec["method"], _alpha_of(rec), k, int(rec["seed"]))].append(rec)
    if not groups:
        raise IncompleteInputError("no decoded records to evaluate")

    configs = sorted({(m, a) for m, a, _, _ in groups}, key=_config_key)
    seeds = sorted(set(expected_seeds) if expected_seeds is not None else {s for *_, s in groups})
    missing = []
    for m, a in configs:
        cfg_seeds = seeds if expected_seeds is not None else sorted({s for mm, aa, _, s in groups if (mm, aa) == (m, a)})
        for s in cfg_seeds:
            anchors = None
            for k in ks:
                cell = groups.get((m, a, k, s))
                label = f"(method={m}, alpha={'_' if a is None else a}, k={k}, seed={s})"
                if cell is None:
                    missing.append(label)
                    continue
                here = sorted(tuple(r["anchor"]) for r in cell)
                if len(set(here)) != len(here):
                    raise ValidationError(f"duplicate anchors in cell {label}")
                if anchors is None:
                    anchors = here
                elif here != anchors:
                    missing.append(f"{label} covers {len(here)} windows, expected the same {len(anchors)} as k={ks[0]}")
    if missing:
        raise IncompleteInputError("incomplete decoded input; missing cells: " + "; ".join(missing))

    per_seed = {key: score_cell(recs) for key, recs in sorted(groups.items(), key=lambda kv: (_config_key(kv[0][:2]), kv[0][2], kv[0][3]))}
    report = MetricReport(cells={}, seeds=seeds, per_seed=per_seed)
    for m, a in configs:
        for k in ks:
            vals = {name: [v[name] for (mm, aa, kk, _), v in per_seed.items() if (mm, aa, kk) == (m, a, k)] for name in METRICS}
            n = len(vals["cider"])
            if n == 1:
                msg = f"single seed for method={m} alpha={'_' if a is None else a} k={k}: std reported as 0"
                report.warnings.append(msg)
                warnings.warn(msg, stacklevel=2)
            report.cells[(m, a, k)] = {
                name: (float(np.mean(v)), float(np.std(v, ddof=1)) if n > 1 else 0.0, n) for name, v in vals.items()
            }
    return report


def _fmt_alpha(a: float | None) -> str:
    return "_" if a is None else f"{a:g}"


def write_report_csv(report: MetricReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "alpha", "k", "metric", "mean", "std", "n_seeds"])
        for (m, a) in report.configs():
            for k in sorted({kk for mm, aa, kk in report.cells if (mm, aa) == (m, a)}):
                for name in METRICS:
                    mean, std, n = report.cells[(m, a, k)][name]
                    w.writerow([m, _fmt_alpha(a), k, name, f"{mean:.9g}", f"{std:.9g}", n])


def format_table(report: MetricReport) -> str:
    """Rows are method/alpha, columns are metrics grouped by k, best mean per column starred."""
    ks = sorted({k for _, _, k in report.cells})
    headers = ["method", "alpha"] + [f"k={k} {name}" for k in ks for name in METRICS]
    best = {}
    for k in ks:
        for name in METRICS:
            best[(k, name)] = max(v[name][0] for (_, _, kk), v in report.cells.items() if kk == k)
    rows = []
    for m, a in report.configs():
        row = [m, _fmt_alpha(a)]
        for k in ks:
            for name in METRICS:
                mean, std, _ = report.cells[(m, a, k)][name]
                star = "*" if mean == best[(k, name)] else " "
                row.append(f"{mean:.3f}±{std:.3f}{star}")
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"
