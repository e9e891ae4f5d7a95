"""Exhaustive cosine-similarity retrieval over embedding tables."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import DataError


def cosine(v, c):
    """Cosine similarity of two vectors, clamped to [-1, 1] against float drift."""
    v = np.asarray(v, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if v.shape != c.shape or v.ndim != 1:
        raise DataError(f"cosine needs two equal-length vectors, got {v.shape} and {c.shape}")
    nv2 = float(np.dot(v, v))
    nc2 = float(np.dot(c, c))
    if nv2 == 0.0 or nc2 == 0.0:
        raise DataError("cosine undefined for a zero vector")
    # One sqrt of the product keeps collinear pairs at exactly +-1.
    return float(min(1.0, max(-1.0, float(np.dot(v, c)) / math.sqrt(nv2 * nc2))))


@dataclass
class RetrievalResult:
    """Top-k images for one query: (image_id, score) pairs, best first."""

    text_id: str
    ranked: list

    def image_ids(self):
        return [iid for iid, _ in self.ranked]


def _scores_for_query(query, images):
    # One matvec per query keeps results independent of batching/thread count.
    qn = np.linalg.norm(query)
    if qn == 0.0:
        raise DataError("zero query vector")
    norms = np.linalg.norm(images.vectors, axis=1)
    scores = images.vectors @ query
    scores /= norms * qn
    np.clip(scores, -1.0, 1.0, out=scores)
    return scores


def retrieve_topk(query, images, k, text_id="query"):
    """Exhaustively score `query` against every image and keep the top k.

    Ties are broken by image file order (earlier row wins). Returns
    min(k, len(images)) entries.
    """
    if k < 1:
        raise DataError("k must be >= 1")
    query = np.asarray(query, dtype=np.float64)
    if query.ndim != 1 or query.shape[0] != images.dim:
        raise DataError(f"query dim {query.shape} does not match image dim {images.dim}")
    if len(images) == 0:
        raise DataError("cannot retrieve from an empty image table")
    scores = _scores_for_query(query, images)
    # Stable sort on -score keeps ascending file order among equal scores.
    order = np.argsort(-scores, kind="stable")[: min(k, len(images))]
    ranked = [(images.ids[int(i)], float(scores[int(i)])) for i in order]
    return RetrievalResult(text_id=text_id, ranked=ranked)


def retrieve_all(texts, images, k, threads=1):
    """Run retrieve_topk for every text, preserving text file order.

    `threads` > 1 fans queries out over a thread pool; output is identical to
    the serial run because each query is scored independently.
    """
    if texts.dim != images.dim:
        raise DataError(f"text dim {texts.dim} does not match image dim {images.dim}")
    jobs = list(texts.records())
    if threads <= 1 or len(jobs) < 2:
        return [retrieve_topk(vec, images, k, text_id=tid) for tid, vec in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futs = [pool.submit(retrieve_topk, vec, images, k, tid) for tid, vec in jobs]
        return [f.result() for f in futs]
