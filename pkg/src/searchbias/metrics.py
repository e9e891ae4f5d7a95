"""Bias and recall metrics for retrieval results.

The headline number is the top-k gender skew: for one query,
delta = (N_male - N_female) / (N_male + N_female) over the retrieved images,
defined as 0 when no gendered image is retrieved. Averaging delta over
queries gives the corpus-level bias; +1 means all-male retrievals, -1
all-female. The male share of gendered retrievals is (1 + bias) / 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .core import DataError, GenderLabel
from .retrieval import cosine


class UndefinedBiasError(DataError):
    """An occupation term has no Male or no Female image to compare against."""


def delta_k(result, labels, k=None):
    """Per-query gender skew of the top-k retrieved images.

    Counts Male and Female labels among the first k entries of `result`
    (all entries when k is None) and returns their normalized difference,
    or 0.0 when neither gender appears.
    """
    ranked = result.ranked if k is None else result.ranked[:k]
    n_male = 0
    n_female = 0
    for image_id, _ in ranked:
        if image_id not in labels:
            raise DataError(f"retrieved image {image_id!r} has no gender label")
        lab = labels[image_id]
        if lab is GenderLabel.MALE:
            n_male += 1
        elif lab is GenderLabel.FEMALE:
            n_female += 1
    if n_male + n_female == 0:
        return 0.0
    return (n_male - n_female) / (n_male + n_female)


@dataclass
class BiasReport:
    k: int
    bias_at_k: float
    per_query: dict = field(repr=False)
    n_queries: int

    @property
    def male_share(self):
        return (1.0 + self.bias_at_k) / 2.0


@dataclass
class RecallReport:
    k: int
    recall_at_k: float
    n_queries: int


def bias_at_k(results, labels, k):
    """Mean per-query gender skew at cutoff k over all queries."""
    if k < 1:
        raise DataError("k must be >= 1")
    if not results:
        raise DataError("no retrieval results to score")
    per_query = {r.text_id: delta_k(r, labels, k) for r in results}
    bias = math.fsum(per_query.values()) / len(per_query)
    return BiasReport(k=k, bias_at_k=bias, per_query=per_query, n_queries=len(per_query))


def recall_at_k(results, truth, k):
    """Fraction of queries whose ground-truth image appears in the top k."""
    if k < 1:
        raise DataError("k must be >= 1")
    if not results:
        raise DataError("no retrieval results to score")
    hits = 0
    for r in results:
        if r.text_id not in truth:
            raise DataError(f"text {r.text_id!r} has no ground-truth image")
        if truth[r.text_id] in set(r.image_ids()[:k]):
            hits += 1
    return RecallReport(k=k, recall_at_k=hits / len(results), n_queries=len(results))


def occupation_bias(term_vector, images, labels):
    """Similarity gap of one query vector toward Male versus Female images.

    Returns mean cosine over Male-labeled images minus mean cosine over
    Female-labeled images. Raises UndefinedBiasError when either side is
    empty, so callers can skip the term.
    """
    male_sims = []
    female_sims = []
    for image_id, vec in images.records():
        if image_id not in labels:
            raise DataError(f"image {image_id!r} has no gender label")
        lab = labels[image_id]
        if lab is GenderLabel.MALE:
            male_sims.append(cosine(term_vector, vec))
        elif lab is GenderLabel.FEMALE:
            female_sims.append(cosine(term_vector, vec))
    if not male_sims or not female_sims:
        raise UndefinedBiasError("no Male or no Female images; similarity gap undefined")
    return math.fsum(male_sims) / len(male_sims) - math.fsum(female_sims) / len(female_sims)


@dataclass
class OccupationBiasReport:
    per_occupation: dict
    mean_abs_bias: float
    skipped: list


def occupation_bias_report(terms, images, labels, warn=None):
    """Score every term in the `terms` table, skipping undefined ones.

    `warn` is called with a message for each skipped term. Errors out if no
    term is scorable at all.
    """
    per_occupation = {}
    skipped = []
    for term_id, vec in terms.records():
        try:
            per_occupation[term_id] = occupation_bias(vec, images, labels)
        except UndefinedBiasError:
            skipped.append(term_id)
            if warn is not None:
                warn(f"occupation {term_id!r}: missing a gender class, excluded from the mean")
    if not per_occupation:
        raise DataError("no occupation term had both Male and Female images to compare")
    mean_abs = math.fsum(abs(b) for b in per_occupation.values()) / len(per_occupation)
    return OccupationBiasReport(
        per_occupation=per_occupation, mean_abs_bias=mean_abs, skipped=skipped
    )
