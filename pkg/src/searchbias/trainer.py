"""Desk-scale contrastive trainer with gender-fair negative sampling.

Encoders are linear projections, not a full cross-attention stack: the
debiasing idea under test is the negative-sampling strategy, which does not
depend on the encoder architecture, and linear maps keep gradient checks and
determinism tractable.

The image-to-text loss and the text-to-image loss for gender-specific queries
use the hardest in-batch negative. For gender-neutral queries, the fair
text-to-image loss replaces the hardest negative with an equal-weight average
of hinge terms over the Male and Female image partitions of the batch, and the
total objective blends the fair and standard text-to-image losses with a
weight alpha. The image-to-text direction is never altered.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .core import DataError, Dataset, EmbeddingTable, GenderLabel
from .metrics import bias_at_k, recall_at_k
from .retrieval import retrieve_all


@dataclass
class TrainerConfig:
    gamma: float = 0.2
    alpha: float = 0.4
    lr: float = 0.01
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    emb_dim: int = 32
    # Single-sample fair negatives instead of the full partition expectation.
    mc_negatives: bool = False

    def __post_init__(self):
        if not self.gamma > 0:
            raise DataError("gamma must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise DataError("alpha must be in [0, 1]")
        if self.lr < 0:
            raise DataError("lr must be >= 0")
        if self.epochs < 0:
            raise DataError("epochs must be >= 0")
        if self.batch_size < 4:
            raise DataError("batch_size must be >= 4")
        if self.emb_dim < 1:
            raise DataError("emb_dim must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, obj):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise DataError(f"unknown trainer config keys: {sorted(extra)}")
        return cls(**obj)


@dataclass
class TripletBatch:
    """A batch of positive (image, text) pairs with gender partitions.

    `neutral_query[j]` marks texts that are gender-neutral queries (the fair
    loss applies to them). Partitions hold row indices of the unique Male /
    Female / Neutral images in the batch; a duplicated image contributes one
    row, so expectations never double-count a negative.
    """

    image_vecs: np.ndarray
    text_vecs: np.ndarray
    image_ids: list
    image_labels: list
    neutral_query: np.ndarray
    male_rows: list = field(init=False)
    female_rows: list = field(init=False)
    neutral_rows: list = field(init=False)
    codes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.image_ids)
        self.image_vecs = np.asarray(self.image_vecs, dtype=np.float64)
        self.text_vecs = np.asarray(self.text_vecs, dtype=np.float64)
        self.neutral_query = np.asarray(self.neutral_query, dtype=bool)
        if n == 0:
            raise DataError("empty batch")
        if (
            self.image_vecs.shape[0] != n
            or self.text_vecs.shape[0] != n
            or len(self.image_labels) != n
            or self.neutral_query.shape[0] != n
        ):
            raise DataError("batch fields disagree on length")
        code_of = {}
        codes = np.empty(n, dtype=np.int64)
        male, female, neutral = [], [], []
        for i, id_ in enumerate(self.image_ids):
            if id_ not in code_of:
                code_of[id_] = len(code_of)
                lab = self.image_labels[i]
                if lab is GenderLabel.MALE:
                    male.append(i)
                elif lab is GenderLabel.FEMALE:
                    female.append(i)
                else:
                    neutral.append(i)
            codes[i] = code_of[id_]
        self.male_rows = male
        self.female_rows = female
        self.neutral_rows = neutral
        self.codes = codes

    def __len__(self):
        return len(self.image_ids)


@dataclass
class LinearEncoders:
    """Linear projection maps; similarity is cosine of the projected vectors."""

    w_img: np.ndarray
    w_txt: np.ndarray

    def __post_init__(self):
        self.w_img = np.asarray(self.w_img, dtype=np.float64)
        self.w_txt = np.asarray(self.w_txt, dtype=np.float64)
        if self.w_img.ndim != 2 or self.w_txt.ndim != 2 or self.w_img.shape != self.w_txt.shape:
            raise DataError("encoder matrices must be 2-d and of equal shape")
        if not (np.all(np.isfinite(self.w_img)) and np.all(np.isfinite(self.w_txt))):
            raise DataError("encoder matrices must be finite")

    @classmethod
    def init(cls, d_in, emb_dim, rng):
        scale = 1.0 / math.sqrt(d_in)
        return cls(
            w_img=scale * rng.standard_normal((emb_dim, d_in)),
            w_txt=scale * rng.standard_normal((emb_dim, d_in)),
        )

    def encode_images(self, vectors):
        return np.asarray(vectors, dtype=np.float64) @ self.w_img.T

    def encode_texts(self, vectors):
        return np.asarray(vectors, dtype=np.float64) @ self.w_txt.T

    def save(self, path, cfg=None):
        payload = {
            "w_img": self.w_img.tolist(),
            "w_txt": self.w_txt.tolist(),
            "cfg": cfg.to_dict() if cfg is not None else None,
        }
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(payload, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: invalid checkpoint JSON ({exc.msg})") from None
        for key in ("w_img", "w_txt"):
            if key not in obj:
                raise DataError(f"{path}: checkpoint missing {key!r}")
        enc = cls(w_img=np.asarray(obj["w_img"]), w_txt=np.asarray(obj["w_txt"]))
        cfg = TrainerConfig.from_dict(obj["cfg"]) if obj.get("cfg") else None
        return enc, cfg


def _similarity(batch, encoders):
    a = batch.image_vecs @ encoders.w_img.T
    b = batch.text_vecs @ encoders.w_txt.T
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if not (np.all(na > 0) and np.all(nb > 0)):
        raise RuntimeError("encoder projected a vector to zero norm")
    ah = a / na[:, None]
    bh = b / nb[:, None]
    return ah @ bh.T, ah, bh, na, nb


def _check_pairable(batch):
    if len(batch) < 2:
        raise DataError("batch of size 1 has no negatives")


def _hardest_ti_terms(batch, s, gamma):
    """Per-pair standard text-to-image hinge terms and their negative rows."""
    n = len(batch)
    # A pair's own image (by id) is never a negative.
    valid = batch.codes[:, None] != batch.codes[None, :]
    masked = np.where(valid, s, -np.inf)
    neg_row = np.argmax(masked, axis=0)
    has_neg = np.isfinite(masked[neg_row, np.arange(n)])
    pos = np.diag(s)
    hinge = gamma - pos + s[neg_row, np.arange(n)]
    terms = np.where(has_neg & (hinge > 0.0), hinge, 0.0)
    return terms, neg_row, has_neg


def triplet_loss_ti(batch, encoders, gamma):
    """Text-to-image hinge loss with the hardest in-batch negative image."""
    _check_pairable(batch)
    s, *_ = _similarity(batch, encoders)
    terms, _, _ = _hardest_ti_terms(batch, s, gamma)
    return float(np.sum(terms))


def triplet_loss_it(batch, encoders, gamma):
    """Image-to-text hinge loss with the hardest in-batch negative text."""
    _check_pairable(batch)
    s, *_ = _similarity(batch, encoders)
    n = len(batch)
    valid = batch.codes[:, None] != batch.codes[None, :]
    masked = np.where(valid, s, -np.inf)
    neg_col = np.argmax(masked, axis=1)
    has_neg = np.isfinite(masked[np.arange(n), neg_col])
    pos = np.diag(s)
    hinge = gamma - pos + s[np.arange(n), neg_col]
    terms = np.where(has_neg & (hinge > 0.0), hinge, 0.0)
    return float(np.sum(terms))


def _fair_ti_terms(batch, s, gamma, rng, mc_negatives):
    """Per-pair fair text-to-image terms.

    Neutral queries average ramped hinges over the Male and the Female
    partition (own image excluded), half weight each; everything else, and any
    neutral query whose exclusion empties a partition, takes the standard
    hardest-negative term.
    """
    n = len(batch)
    std_terms, _, _ = _hardest_ti_terms(batch, s, gamma)
    terms = std_terms.copy()
    pos = np.diag(s)
    male = np.asarray(batch.male_rows, dtype=np.int64)
    female = np.asarray(batch.female_rows, dtype=np.int64)
    for j in range(n):
        if not batch.neutral_query[j]:
            continue
        m_rows = male[batch.codes[male] != batch.codes[j]] if male.size else male
        f_rows = female[batch.codes[female] != batch.codes[j]] if female.size else female
        if m_rows.size == 0 or f_rows.size == 0:
            continue  # fallback already in terms[j]
        if mc_negatives:
            if rng is None:
                raise DataError("mc_negatives mode needs an rng")
            side = m_rows if rng.integers(2) == 0 else f_rows
            pick = side[rng.integers(side.size)]
            terms[j] = max(0.0, gamma - pos[j] + s[pick, j])
        else:
            hm = np.maximum(0.0, gamma - pos[j] + s[m_rows, j])
            hf = np.maximum(0.0, gamma - pos[j] + s[f_rows, j])
            terms[j] = 0.5 * float(np.mean(hm)) + 0.5 * float(np.mean(hf))
    return terms


def fair_loss_ti(batch, encoders, gamma, rng=None, mc_negatives=False):
    """Text-to-image loss with gender-fair negatives for neutral queries."""
    _check_pairable(batch)
    s, *_ = _similarity(batch, encoders)
    terms = _fair_ti_terms(batch, s, gamma, rng, mc_negatives)
    return float(np.sum(terms))


def total_loss(batch, encoders, cfg, rng=None):
    """Image-to-text loss plus the alpha blend of fair and standard t-to-i losses."""
    l_it = triplet_loss_it(batch, encoders, cfg.gamma)
    l_ti = triplet_loss_ti(batch, encoders, cfg.gamma)
    l_fair = fair_loss_ti(batch, encoders, cfg.gamma, rng, cfg.mc_negatives)
    return l_it + cfg.alpha * l_fair + (1.0 - cfg.alpha) * l_ti


def _loss_and_grad(batch, encoders, cfg, rng=None):
    """Total loss and its analytic gradient w.r.t. both encoder matrices.

    Accumulates a weight matrix g where g[i, j] is the coefficient of
    S(image_i, text_j) in the loss, then backpropagates through the cosine in
    closed form. Hinge kinks take subgradient 0; hardest-negative choices are
    held fixed, which is exact away from argmax ties.
    """
    _check_pairable(batch)
    s, ah, bh, na, nb = _similarity(batch, encoders)
    n = len(batch)
    idx = np.arange(n)
    g = np.zeros((n, n))
    valid = batch.codes[:, None] != batch.codes[None, :]
    masked = np.where(valid, s, -np.inf)
    pos = np.diag(s)

    # Image-to-text direction, weight 1.
    neg_col = np.argmax(masked, axis=1)
    it_has = np.isfinite(masked[idx, neg_col])
    it_hinge = cfg.gamma - pos + s[idx, neg_col]
    it_act = it_has & (it_hinge > 0.0)
    l_it = float(np.sum(np.where(it_act, it_hinge, 0.0)))
    np.add.at(g, (idx[it_act], neg_col[it_act]), 1.0)
    g[idx[it_act], idx[it_act]] -= 1.0

    # Standard text-to-image direction, weight (1 - alpha).
    neg_row = np.argmax(masked, axis=0)
    ti_has = np.isfinite(masked[neg_row, idx])
    ti_hinge = cfg.gamma - pos + s[neg_row, idx]
    ti_act = ti_has & (ti_hinge > 0.0)
    ti_terms = np.where(ti_act, ti_hinge, 0.0)
    l_ti = float(np.sum(ti_terms))
    w_std = 1.0 - cfg.alpha
    if w_std:
        np.add.at(g, (neg_row[ti_act], idx[ti_act]), w_std)
        g[idx[ti_act], idx[ti_act]] -= w_std

    # Fair text-to-image direction, weight alpha.
    if cfg.alpha:
        male = np.asarray(batch.male_rows, dtype=np.int64)
        female = np.asarray(batch.female_rows, dtype=np.int64)
        fair_terms = ti_terms.copy()
        fair_g = np.zeros((n, n))
        fallback = np.ones(n, dtype=bool)
        for j in range(n):
            if not batch.neutral_query[j]:
                continue
            m_rows = male[batch.codes[male] != batch.codes[j]] if male.size else male
            f_rows = female[batch.codes[female] != batch.codes[j]] if female.size else female
            if m_rows.size == 0 or f_rows.size == 0:
                continue
            fallback[j] = False
            if cfg.mc_negatives:
                if rng is None:
                    raise DataError("mc_negatives mode needs an rng")
                side = m_rows if rng.integers(2) == 0 else f_rows
                pick = int(side[rng.integers(side.size)])
                h = cfg.gamma - pos[j] + s[pick, j]
                fair_terms[j] = max(0.0, float(h))
                if h > 0.0:
                    fair_g[pick, j] += 1.0
                    fair_g[j, j] -= 1.0
            else:
                hm = cfg.gamma - pos[j] + s[m_rows, j]
                hf = cfg.gamma - pos[j] + s[f_rows, j]
                am = hm > 0.0
                af = hf > 0.0
                fair_terms[j] = 0.5 * float(np.mean(np.where(am, hm, 0.0))) + 0.5 * float(
                    np.mean(np.where(af, hf, 0.0))
                )
                fair_g[m_rows[am], j] += 0.5 / m_rows.size
                fair_g[f_rows[af], j] += 0.5 / f_rows.size
                fair_g[j, j] -= 0.5 * (int(am.sum()) / m_rows.size + int(af.sum()) / f_rows.size)
        # Fallback pairs reuse the standard hardest-negative term.
        fb_act = ti_act & fallback
        np.add.at(fair_g, (neg_row[fb_act], idx[fb_act]), 1.0)
        fair_g[idx[fb_act], idx[fb_act]] -= 1.0
        l_fair = float(np.sum(fair_terms))
        g += cfg.alpha * fair_g
    else:
        l_fair = 0.0  # weight 0: skip the fair pass entirely

    loss = l_it + cfg.alpha * l_fair + (1.0 - cfg.alpha) * l_ti

    # d cos(a_i, b_j) / d a_i = (bh_j - S_ij ah_i) / |a_i|, and symmetrically.
    row_ws = (g * s).sum(axis=1)
    col_ws = (g * s).sum(axis=0)
    u = (g @ bh - row_ws[:, None] * ah) / na[:, None]
    w = (g.T @ ah - col_ws[:, None] * bh) / nb[:, None]
    d_img = u.T @ batch.image_vecs
    d_txt = w.T @ batch.text_vecs
    return loss, d_img, d_txt


def _build_pairs(dataset, text_labels=None):
    """Assemble training pair arrays from a dataset, in text file order."""
    img_rows = []
    ids = []
    labels = []
    neutral = []
    for tid in dataset.texts.ids:
        if tid not in dataset.truth:
            raise DataError(f"text {tid!r} has no ground-truth image for training")
        iid = dataset.truth[tid]
        img_rows.append(dataset.images.row_index(iid))
        ids.append(iid)
        labels.append(dataset.labels[iid])
        if text_labels is not None:
            if tid not in text_labels:
                raise DataError(f"text {tid!r} missing from text labels")
            neutral.append(text_labels[tid] is GenderLabel.NEUTRAL)
        else:
            # Without caption-level flags, a text is a neutral query iff its
            # truth image is Neutral.
            neutral.append(dataset.labels[iid] is GenderLabel.NEUTRAL)
    image_vecs = dataset.images.vectors[np.asarray(img_rows, dtype=np.int64)]
    return image_vecs, dataset.texts.vectors, ids, labels, np.asarray(neutral, dtype=bool)


def train(dataset, cfg, text_labels=None, val_frac=0.1, on_epoch=None):
    """Mini-batch SGD on the blended objective; deterministic per seed.

    Shuffling, the train/val split, initialization, and (in MC mode) negative
    sampling draw from independent seeded streams, so runs with the same
    config are bit-reproducible and alpha does not perturb the shuffle order.
    Raises RuntimeError if the loss stops being finite.
    """
    if not 0.0 <= val_frac < 1.0:
        raise DataError("val_frac must be in [0, 1)")
    image_vecs, text_vecs, image_ids, image_labels, neutral = _build_pairs(dataset, text_labels)
    n = len(image_ids)
    if n < 2:
        raise DataError("need at least 2 training pairs")

    ss = np.random.SeedSequence(cfg.seed)
    init_rng, split_rng, shuffle_rng, neg_rng = (np.random.default_rng(s) for s in ss.spawn(4))
    encoders = LinearEncoders.init(dataset.images.dim, cfg.emb_dim, init_rng)

    perm = split_rng.permutation(n)
    n_val = int(round(n * val_frac))
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]
    if train_idx.size < 2:
        raise DataError("training split has fewer than 2 pairs")

    text_id_list = list(dataset.texts.ids)

    def epoch_metrics(epoch, loss_sum):
        row = {"epoch": epoch, "total_loss": loss_sum}
        if val_idx.size:
            enc_imgs = EmbeddingTable(list(dataset.images.ids), encoders.encode_images(dataset.images.vectors))
            val_tids = [text_id_list[int(i)] for i in val_idx]
            enc_txts = EmbeddingTable(val_tids, encoders.encode_texts(dataset.texts.vectors[val_idx]))
            results = retrieve_all(enc_txts, enc_imgs, k=10)
            row["val_recall_at_10"] = recall_at_k(results, dataset.truth, 10).recall_at_k
            row["val_bias_at_10"] = bias_at_k(results, dataset.labels, 10).bias_at_k
        else:
            row["val_recall_at_10"] = float("nan")
            row["val_bias_at_10"] = float("nan")
        if on_epoch is not None:
            on_epoch(row)
        return row

    for epoch in range(1, cfg.epochs + 1):
        order = train_idx[shuffle_rng.permutation(train_idx.size)]
        loss_sum = 0.0
        for lo in range(0, order.size, cfg.batch_size):
            sel = order[lo : lo + cfg.batch_size]
            if sel.size < 2:
                continue  # a singleton tail batch has no negatives
            batch = TripletBatch(
                image_vecs=image_vecs[sel],
                text_vecs=text_vecs[sel],
                image_ids=[image_ids[int(i)] for i in sel],
                image_labels=[image_labels[int(i)] for i in sel],
                neutral_query=neutral[sel],
            )
            loss, d_img, d_txt = _loss_and_grad(batch, encoders, cfg, neg_rng)
            if not math.isfinite(loss):
                raise RuntimeError(f"training diverged: non-finite loss at epoch {epoch}")
            loss_sum += loss
            new_wi = encoders.w_img - cfg.lr * d_img
            new_wt = encoders.w_txt - cfg.lr * d_txt
            if not (np.all(np.isfinite(new_wi)) and np.all(np.isfinite(new_wt))):
                raise RuntimeError(f"training diverged: non-finite encoder update at epoch {epoch}")
            encoders = LinearEncoders(w_img=new_wi, w_txt=new_wt)
        epoch_metrics(epoch, loss_sum)
    return encoders
