"""Evaluation metrics: Dice and clDice over binary masks, multi-label
macro/micro F1, BLEU-n and ROUGE-L on token lists, and percentile bootstrap
confidence intervals.

Dice and clDice return None when undefined (both masks empty / an empty
skeleton); aggregation skips those, i.e. scores are pooled over positives
only. Zero-denominator F1 terms score 0. BLEU is unsmoothed.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from segprompt.errors import ContractError
from segprompt.masks import Mask

# The five mask-relevant findings, in report order.
MR_FINDINGS = ("lung_opacity", "cardiomegaly", "pneumothorax",
               "support_devices", "pleural_effusion")


def dice(pred: Mask, gt: Mask) -> float | None:
    """2|P∩G| / (|P|+|G|); None (skipped in aggregation) when both empty."""
    if pred.shape != gt.shape:
        raise ContractError(f"extent mismatch {pred.shape} vs {gt.shape}")
    p, g = int(pred.sum()), int(gt.sum())
    if p + g == 0:
        return None
    inter = int((pred & gt).sum())
    return 2.0 * inter / (p + g)


def _neighbors(m: np.ndarray) -> list[np.ndarray]:
    """P2..P9 (N, NE, E, SE, S, SW, W, NW) of a zero-padded mask."""
    z = np.zeros((m.shape[0] + 2, m.shape[1] + 2), dtype=m.dtype)
    z[1:-1, 1:-1] = m
    return [
        z[:-2, 1:-1], z[:-2, 2:], z[1:-1, 2:], z[2:, 2:],
        z[2:, 1:-1], z[2:, :-2], z[1:-1, :-2], z[:-2, :-2],
    ]


def skeletonize(m: Mask) -> Mask:
    """Zhang-Suen iterative thinning to convergence. The output is a subset
    of the input and preserves 8-connectivity."""
    img = m.astype(np.uint8)
    while True:
        changed = False
        for phase in (0, 1):
            p = _neighbors(img)
            b = sum(p)
            ring = np.stack(p + [p[0]])
            a = ((ring[:-1] == 0) & (ring[1:] == 1)).sum(axis=0)
            if phase == 0:
                cond = (p[0] * p[2] * p[4] == 0) & (p[2] * p[4] * p[6] == 0)
            else:
                cond = (p[0] * p[2] * p[6] == 0) & (p[0] * p[4] * p[6] == 0)
            delete = (img == 1) & (b >= 2) & (b <= 6) & (a == 1) & cond
            if delete.any():
                img[delete] = 0
                changed = True
        if not changed:
            return img.astype(bool)


def cl_dice(pred: Mask, gt: Mask) -> float | None:
    """Centerline Dice: harmonic mean of topology precision and sensitivity
    computed with thinning-based skeletons; None when either skeleton is
    empty."""
    if pred.shape != gt.shape:
        raise ContractError(f"extent mismatch {pred.shape} vs {gt.shape}")
    skel_p = skeletonize(pred)
    skel_g = skeletonize(gt)
    np_, ng = int(skel_p.sum()), int(skel_g.sum())
    if np_ == 0 or ng == 0:
        return None
    tprec = int((skel_p & gt).sum()) / np_
    tsens = int((skel_g & pred).sum()) / ng
    if tprec + tsens == 0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


def aggregate_positive(scores: Sequence[float | None]) -> float | None:
    """Mean over defined scores only; None when every score is undefined."""
    defined = [s for s in scores if s is not None]
    return float(np.mean(defined)) if defined else None


# -- multi-label F1 -----------------------------------------------------------


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def macro_micro_f1(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]
                   ) -> tuple[float, float]:
    """Per-finding F1 averaged (macro) and pooled-count F1 (micro) over
    binary label vectors; zero-denominator findings score 0."""
    p = np.asarray(preds, dtype=bool)
    g = np.asarray(gts, dtype=bool)
    if p.shape != g.shape or p.ndim != 2:
        raise ContractError(f"label tables must match, got {p.shape} vs {g.shape}")
    tp = (p & g).sum(axis=0)
    fp = (p & ~g).sum(axis=0)
    fn = (~p & g).sum(axis=0)
    macro = float(np.mean([_f1(*counts) for counts in zip(tp, fp, fn)]))
    micro = _f1(int(tp.sum()), int(fp.sum()), int(fn.sum()))
    return macro, micro


# -- lexical ----------------------------------------------------------------


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: Sequence[str], reference: Sequence[str], n: int = 4) -> float:
    """Unsmoothed BLEU-n on 0-100: geometric mean of modified n-gram
    precisions times the brevity penalty; 0 if any precision is 0."""
    return corpus_bleu([candidate], [reference], n=n)


def corpus_bleu(candidates: Sequence[Sequence[str]],
                references: Sequence[Sequence[str]], n: int = 4) -> float:
    if n < 1:
        raise ContractError("bleu order must be >= 1")
    if len(candidates) != len(references):
        raise ContractError("candidate/reference count mismatch")
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    if cand_len == 0:
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        matched = total = 0
        for cand, ref in zip(candidates, references):
            counts = _ngram_counts(cand, order)
            ref_counts = _ngram_counts(ref, order)
            matched += sum(min(c, ref_counts[g]) for g, c in counts.items())
            total += max(len(cand) - order + 1, 0)
        if matched == 0 or total == 0:
            return 0.0
        log_sum += math.log(matched / total)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_sum / n)


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str],
            beta: float = 1.2) -> float:
    """LCS-based F-measure on 0-100 (recall-weighted by beta)."""
    if not candidate or not reference:
        return 0.0
    lcs = _lcs_len(candidate, reference)
    if lcs == 0:
        return 0.0
    prec = lcs / len(candidate)
    rec = lcs / len(reference)
    b2 = beta * beta
    return 100.0 * (1 + b2) * prec * rec / (rec + b2 * prec)


# -- bootstrap ----------------------------------------------------------------


@dataclass
class BootstrapSpec:
    samples: int = 500
    statistic: str = "median"  # median | mean
    interval: float = 95.0

    def __post_init__(self):
        if self.samples < 1:
            raise ContractError("bootstrap needs at least one sample")
        if self.statistic not in ("median", "mean"):
            raise ContractError(f"unknown statistic {self.statistic!r}")


def _stat_fn(name: str) -> Callable[[np.ndarray], float]:
    return {"median": np.median, "mean": np.mean}[name]


def bootstrap_ci(scores: Sequence[float], spec: BootstrapSpec = BootstrapSpec(),
                 seed: int = 0) -> tuple[float, float, float]:
    """(statistic on the full sample, low percentile, high percentile) from
    resampling with replacement; deterministic under the seed."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise ContractError("bootstrap over an empty score list")
    stat = _stat_fn(spec.statistic)
    return bootstrap_ci_fn(arr, lambda resample: float(stat(resample)), spec, seed)


def bootstrap_ci_fn(items: np.ndarray, statistic_fn: Callable[[np.ndarray], float],
                    spec: BootstrapSpec = BootstrapSpec(), seed: int = 0
                    ) -> tuple[float, float, float]:
    """Generic percentile bootstrap: resample rows of ``items``."""
    n = len(items)
    if n == 0:
        raise ContractError("bootstrap over an empty item list")
    rng = np.random.default_rng(seed)
    stats = np.empty(spec.samples)
    for k in range(spec.samples):
        idx = rng.integers(0, n, size=n)
        stats[k] = statistic_fn(items[idx])
    center = statistic_fn(items)
    tail = (100.0 - spec.interval) / 2.0
    low, high = np.percentile(stats, [tail, 100.0 - tail])
    return float(center), float(low), float(high)


def metric_conventions() -> dict:
    return {
        "bleu": {"max_order": 4, "smoothing": "none"},
        "rouge_l": {"beta": 1.2},
        "f1": {"zero_division": 0},
        "dice": {"both_empty": "excluded"},
        "cl_dice": {"empty_skeleton": "excluded", "skeleton": "zhang-suen"},
        "bootstrap": {"samples": 500, "statistic": "median", "interval": 95.0},
    }
