"""Segmentation metrics, cross-modal retrieval accuracy, paired t-test."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import special

from . import kernels
from .embedding import EmbeddingBatch, EncoderHandle, encode_batch


def _pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def boundary(mask):
    """Foreground pixels with a 4-neighbour in the background (outside counts as background)."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def nsd(a, b, tolerance_px: int = 2) -> float:
    """Share of both masks' boundary pixels within ``tolerance_px`` of the other boundary."""
    a, b = _pair(a, b)
    if tolerance_px < 0:
        raise ValueError("tolerance must be non-negative")
    ba, bb = boundary(a), boundary(b)
    na, nb = int(ba.sum()), int(bb.sum())
    if na + nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    hits_a = kernels.within_tolerance(np.argwhere(ba), bb, tolerance_px).sum()
    hits_b = kernels.within_tolerance(np.argwhere(bb), ba, tolerance_px).sum()
    return float(hits_a + hits_b) / (na + nb)


@dataclass(frozen=True)
class SegScore:
    dsc: float
    nsd: float
    tolerance_px: int = 2


def score_masks(pred, gt, tolerance_px=2) -> SegScore:
    return SegScore(dice(pred, gt), nsd(pred, gt, tolerance_px), tolerance_px)


def write_seg_report(scores, csv_path, json_path, tolerance_px):
    """``scores``: list of (image_id, SegScore)."""
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "dsc", "nsd"])
        for image_id, s in scores:
            w.writerow([image_id, repr(s.dsc), repr(s.nsd)])
    d = np.array([s.dsc for _, s in scores], dtype=np.float64)
    n = np.array([s.nsd for _, s in scores], dtype=np.float64)
    summary = {
        "n": len(scores),
        "tolerance": tolerance_px,
        "dsc": {"mean": float(d.mean()) if d.size else None, "std": float(d.std()) if d.size else None},
        "nsd": {"mean": float(n.mean()) if n.size else None, "std": float(n.std()) if n.size else None},
    }
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


# ---------------------------------------------------------------- retrieval


class TopK(NamedTuple):
    image_to_text: float  # percent
    text_to_image: float


def _hits(S, k):
    B = S.shape[0]
    pos = np.diag(S)[:, None]
    greater = (S > pos).sum(axis=1)
    # ties resolved by index order
    ties_before = np.tril(S == pos, k=-1).sum(axis=1)
    return (greater + ties_before) < k


def retrieval_topk(batch: EmbeddingBatch, k: int) -> TopK:
    B = batch.size
    if not 1 <= k < B:
        raise ValueError(f"k must satisfy 1 <= k < batch size ({B}), got {k}")
    S = batch.image_embeddings @ batch.text_embeddings.T
    return TopK(100.0 * _hits(S, k).mean(), 100.0 * _hits(S.T, k).mean())


@dataclass
class RetrievalReport:
    top1_i2t: tuple
    top2_i2t: tuple
    top1_t2i: tuple
    top2_t2i: tuple
    runs: int
    batch_size: int
    seed: int
    model: str = ""
    version: str = ""

    def to_json(self):
        ms = lambda v: {"mean": v[0], "std": v[1]}  # noqa: E731
        return {
            "model": self.model,
            "version": self.version,
            "image_to_text": {"top1": ms(self.top1_i2t), "top2": ms(self.top2_i2t)},
            "text_to_image": {"top1": ms(self.top1_t2i), "top2": ms(self.top2_t2i)},
            "runs": self.runs,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }


def retrieval_protocol(enc: EncoderHandle, pairs, runs: int = 5, batch_size: int = 50, seed: int = 0,
                       embeddings: EmbeddingBatch = None) -> RetrievalReport:
    """Shuffle, cut into full batches (remainder dropped), score top-1/top-2 both ways."""
    n = len(pairs) if embeddings is None else embeddings.size
    if n < batch_size:
        raise ValueError(f"need at least {batch_size} pairs, got {n}")
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if embeddings is None:
        images, prompts = zip(*pairs)
        embeddings = encode_batch(enc, list(images), list(prompts))
    I, T = embeddings.image_embeddings, embeddings.text_embeddings
    per_run = []
    for r in range(runs):
        order = np.random.default_rng([seed, r]).permutation(n)
        scores = []
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            b = EmbeddingBatch(I[idx], T[idx])
            t1, t2 = retrieval_topk(b, 1), retrieval_topk(b, 2)
            scores.append([t1.image_to_text, t2.image_to_text, t1.text_to_image, t2.text_to_image])
        per_run.append(np.mean(scores, axis=0))
    per_run = np.array(per_run)
    mean, std = per_run.mean(axis=0), per_run.std(axis=0)
    cols = [(float(mean[i]), float(std[i])) for i in range(4)]
    return RetrievalReport(cols[0], cols[1], cols[2], cols[3], runs, batch_size, seed,
                           model=getattr(enc, "name", ""), version=getattr(enc, "params_version", ""))


# ---------------------------------------------------------------- statistics


class TTest(NamedTuple):
    t: float
    p: float
    infinite: bool = False


def paired_ttest(scores_a, scores_b) -> TTest:
    """Two-sided paired t-test; the t CDF is evaluated via the regularized incomplete beta."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return TTest(0.0, 1.0, False)
        return TTest(float(np.copysign(np.inf, mean)), 0.0, True)
    t = mean / (sd / np.sqrt(n))
    dof = n - 1
    p = special.betainc(dof / 2.0, 0.5, dof / (dof + t * t))
    return TTest(float(t), float(min(max(p, 0.0), 1.0)), False)
