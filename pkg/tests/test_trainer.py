"""Triplet losses, fair sampling, analytic gradients, and the training loop."""

import json
import math

import numpy as np
import pytest

from searchbias.core import DataError, Dataset, EmbeddingTable, GenderLabel, synth_dataset
from searchbias.trainer import (
    LinearEncoders,
    TrainerConfig,
    TripletBatch,
    _loss_and_grad,
    fair_loss_ti,
    total_loss,
    train,
    triplet_loss_it,
    triplet_loss_ti,
)

M, F, N = GenderLabel.MALE, GenderLabel.FEMALE, GenderLabel.NEUTRAL


def random_batch(seed, n=10, d=6, p_neutral=0.5, dup_images=False):
    rng = np.random.default_rng(seed)
    ids = [f"img{i}" for i in range(n)]
    if dup_images:
        ids[1] = ids[0]  # two texts sharing one image
    labels = [[M, F, N][int(g)] for g in rng.integers(0, 3, n)]
    seen = {}
    for i, iid in enumerate(ids):  # duplicated ids share one label
        if iid in seen:
            labels[i] = labels[seen[iid]]
        else:
            seen[iid] = i
    return TripletBatch(
        image_vecs=rng.standard_normal((n, d)),
        text_vecs=rng.standard_normal((n, d)),
        image_ids=ids,
        image_labels=labels,
        neutral_query=rng.random(n) < p_neutral,
    )


def random_encoders(seed, d=6, emb=5):
    rng = np.random.default_rng(seed + 1000)
    return LinearEncoders.init(d, emb, rng)


def oracle_similarities(batch, encoders):
    a = batch.image_vecs @ encoders.w_img.T
    b = batch.text_vecs @ encoders.w_txt.T
    n = len(batch)
    s = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            num = math.fsum(float(x) * float(y) for x, y in zip(a[i], b[j]))
            na = math.sqrt(math.fsum(float(x) * float(x) for x in a[i]))
            nb = math.sqrt(math.fsum(float(y) * float(y) for y in b[j]))
            s[i, j] = num / (na * nb)
    return s


def oracle_losses(batch, encoders, gamma):
    """Loop-based reference for all three loss terms (full expectation)."""
    s = oracle_similarities(batch, encoders)
    n = len(batch)
    ids = batch.image_ids
    l_it = l_ti = l_fair = 0.0
    for j in range(n):
        others = [i for i in range(n) if ids[i] != ids[j]]
        # Image j against its hardest mismatched text.
        if others:
            best = max(others, key=lambda t: s[j, t])
            h = gamma - s[j, j] + s[j, best]
            if h > 0:
                l_it += h
        # Text j against its hardest mismatched image.
        std = 0.0
        if others:
            best = max(others, key=lambda i: s[i, j])
            h = gamma - s[j, j] + s[best, j]
            std = h if h > 0 else 0.0
        l_ti += std
        term = std
        if batch.neutral_query[j]:
            m_rows = [i for i in batch.male_rows if ids[i] != ids[j]]
            f_rows = [i for i in batch.female_rows if ids[i] != ids[j]]
            if m_rows and f_rows:
                hm = [max(0.0, gamma - s[j, j] + s[i, j]) for i in m_rows]
                hf = [max(0.0, gamma - s[j, j] + s[i, j]) for i in f_rows]
                term = 0.5 * math.fsum(hm) / len(hm) + 0.5 * math.fsum(hf) / len(hf)
        l_fair += term
    return l_it, l_ti, l_fair


def test_losses_match_bruteforce_oracle():
    gamma = 0.3
    for seed in range(12):
        batch = random_batch(seed, n=int(3 + seed % 8), dup_images=seed % 3 == 0)
        enc = random_encoders(seed)
        l_it, l_ti, l_fair = oracle_losses(batch, enc, gamma)
        assert triplet_loss_it(batch, enc, gamma) == pytest.approx(l_it, abs=1e-10)
        assert triplet_loss_ti(batch, enc, gamma) == pytest.approx(l_ti, abs=1e-10)
        assert fair_loss_ti(batch, enc, gamma) == pytest.approx(l_fair, abs=1e-10)


def test_total_loss_is_the_documented_blend():
    batch = random_batch(3)
    enc = random_encoders(3)
    for alpha in (0.0, 0.25, 0.4, 1.0):
        cfg = TrainerConfig(gamma=0.3, alpha=alpha, epochs=1)
        expected = (
            triplet_loss_it(batch, enc, 0.3)
            + alpha * fair_loss_ti(batch, enc, 0.3)
            + (1.0 - alpha) * triplet_loss_ti(batch, enc, 0.3)
        )
        assert total_loss(batch, enc, cfg) == expected


def test_alpha_zero_is_bitwise_standard_objective():
    for seed in range(10):
        batch = random_batch(seed, n=9)
        enc = random_encoders(seed)
        cfg = TrainerConfig(gamma=0.2, alpha=0.0, epochs=1)
        standard = triplet_loss_it(batch, enc, 0.2) + triplet_loss_ti(batch, enc, 0.2)
        assert total_loss(batch, enc, cfg) == standard


def test_loss_and_grad_loss_matches_total_loss():
    batch = random_batch(4)
    enc = random_encoders(4)
    for alpha in (0.0, 0.4, 1.0):
        cfg = TrainerConfig(gamma=0.25, alpha=alpha, epochs=1)
        loss, _, _ = _loss_and_grad(batch, enc, cfg)
        assert loss == total_loss(batch, enc, cfg)


def fd_check(batch, cfg, seed, n_coords=6, h=1e-6, tol=1e-3):
    enc = random_encoders(seed)
    _, d_img, d_txt = _loss_and_grad(batch, enc, cfg)
    rng = np.random.default_rng(seed + 7)

    def loss_at(wi, wt):
        return total_loss(batch, LinearEncoders(w_img=wi, w_txt=wt), cfg)

    for grad, which in ((d_img, "img"), (d_txt, "txt")):
        shape = enc.w_img.shape
        for _ in range(n_coords):
            r, c = int(rng.integers(shape[0])), int(rng.integers(shape[1]))
            wi_p, wt_p = enc.w_img.copy(), enc.w_txt.copy()
            wi_m, wt_m = enc.w_img.copy(), enc.w_txt.copy()
            if which == "img":
                wi_p[r, c] += h
                wi_m[r, c] -= h
            else:
                wt_p[r, c] += h
                wt_m[r, c] -= h
            fd = (loss_at(wi_p, wt_p) - loss_at(wi_m, wt_m)) / (2 * h)
            denom = max(abs(fd), abs(grad[r, c]), 1e-6)
            assert abs(fd - grad[r, c]) / denom <= tol, (which, r, c, fd, grad[r, c])


def test_gradients_match_finite_differences():
    for alpha in (0.0, 0.4, 1.0):
        cfg = TrainerConfig(gamma=0.3, alpha=alpha, epochs=1)
        for seed in (0, 1):
            fd_check(random_batch(seed, n=8), cfg, seed)


def test_loss_invariant_under_batch_permutation():
    batch = random_batch(8, n=12)
    enc = random_encoders(8)
    cfg = TrainerConfig(gamma=0.3, alpha=0.7, epochs=1)
    base = total_loss(batch, enc, cfg)
    perm = np.random.default_rng(9).permutation(12)
    shuffled = TripletBatch(
        image_vecs=batch.image_vecs[perm],
        text_vecs=batch.text_vecs[perm],
        image_ids=[batch.image_ids[int(i)] for i in perm],
        image_labels=[batch.image_labels[int(i)] for i in perm],
        neutral_query=batch.neutral_query[perm],
    )
    assert total_loss(shuffled, enc, cfg) == pytest.approx(base, abs=1e-12)


def test_own_image_never_a_negative():
    # Both pairs share one image; the only admissible negative is row 2.
    vec = np.array([1.0, 0.0, 0.0])
    batch = TripletBatch(
        image_vecs=[vec, vec, [0.0, 1.0, 0.0]],
        text_vecs=[[1.0, 0.1, 0.0], [1.0, -0.1, 0.0], [0.0, 1.0, 0.5]],
        image_ids=["shared", "shared", "other"],
        image_labels=[M, M, F],
        neutral_query=[False, False, False],
    )
    enc = LinearEncoders(w_img=np.eye(3), w_txt=np.eye(3))
    s = oracle_similarities(batch, enc)
    # Hand-build the expected loss with row 2 as every negative.
    gamma = 0.2
    want_ti = sum(max(0.0, gamma - s[j, j] + s[2, j]) for j in (0, 1)) + max(
        0.0, gamma - s[2, 2] + max(s[0, 2], s[1, 2])
    )
    assert triplet_loss_ti(batch, enc, gamma) == pytest.approx(want_ti, abs=1e-12)


def test_batch_of_one_has_no_negatives():
    batch = TripletBatch(
        image_vecs=[[1.0, 0.0]],
        text_vecs=[[1.0, 0.0]],
        image_ids=["a"],
        image_labels=[M],
        neutral_query=[True],
    )
    enc = LinearEncoders(w_img=np.eye(2), w_txt=np.eye(2))
    with pytest.raises(DataError, match="size 1"):
        triplet_loss_ti(batch, enc, 0.2)


def test_all_same_image_batch_has_zero_loss():
    vec = [1.0, 0.2]
    batch = TripletBatch(
        image_vecs=[vec, vec, vec],
        text_vecs=np.random.default_rng(0).standard_normal((3, 2)),
        image_ids=["a", "a", "a"],
        image_labels=[M, M, M],
        neutral_query=[True, True, True],
    )
    enc = LinearEncoders(w_img=np.eye(2), w_txt=np.eye(2))
    cfg = TrainerConfig(gamma=0.5, alpha=0.6, epochs=1)
    assert total_loss(batch, enc, cfg) == 0.0


def test_fair_falls_back_without_both_partitions():
    rng = np.random.default_rng(11)
    batch = TripletBatch(
        image_vecs=rng.standard_normal((5, 4)),
        text_vecs=rng.standard_normal((5, 4)),
        image_ids=[f"i{j}" for j in range(5)],
        image_labels=[M, M, N, N, M],  # no Female image anywhere
        neutral_query=[True] * 5,
    )
    enc = random_encoders(11, d=4)
    assert fair_loss_ti(batch, enc, 0.3) == triplet_loss_ti(batch, enc, 0.3)


def test_mc_negatives_deterministic_and_unbiased():
    rng0 = np.random.default_rng(13)
    batch = TripletBatch(
        image_vecs=rng0.standard_normal((10, 6)),
        text_vecs=rng0.standard_normal((10, 6)),
        image_ids=[f"i{j}" for j in range(10)],
        image_labels=[M, M, M, F, F, F, N, N, M, F],
        neutral_query=[True] * 10,
    )
    enc = random_encoders(13)
    one = fair_loss_ti(batch, enc, 0.3, rng=np.random.default_rng(5), mc_negatives=True)
    two = fair_loss_ti(batch, enc, 0.3, rng=np.random.default_rng(5), mc_negatives=True)
    assert one == two
    with pytest.raises(DataError, match="rng"):
        fair_loss_ti(batch, enc, 0.3, mc_negatives=True)
    full = fair_loss_ti(batch, enc, 0.3)
    rng = np.random.default_rng(6)
    draws = [
        fair_loss_ti(batch, enc, 0.3, rng=rng, mc_negatives=True) for _ in range(4000)
    ]
    assert np.mean(draws) == pytest.approx(full, rel=0.05)


def test_zero_encoded_vector_is_a_runtime_error():
    batch = random_batch(1, n=4)
    dead = LinearEncoders(w_img=np.zeros((5, 6)), w_txt=np.zeros((5, 6)))
    cfg = TrainerConfig(epochs=1)
    with pytest.raises(RuntimeError):
        total_loss(batch, dead, cfg)


def test_trainer_config_validation_and_round_trip():
    cfg = TrainerConfig(gamma=0.5, alpha=0.3, lr=0.01, epochs=2, seed=9)
    assert TrainerConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(DataError):
        TrainerConfig(gamma=0.0)
    with pytest.raises(DataError):
        TrainerConfig(alpha=1.5)
    with pytest.raises(DataError):
        TrainerConfig(lr=-0.1)
    with pytest.raises(DataError):
        TrainerConfig(batch_size=2)
    with pytest.raises(DataError):
        TrainerConfig.from_dict({"gamma": 0.2, "bogus": 1})


def test_encoders_init_save_load(tmp_path):
    rng = np.random.default_rng(2)
    enc = LinearEncoders.init(12, 5, rng)
    assert enc.w_img.shape == (5, 12) and enc.w_txt.shape == (5, 12)
    assert abs(enc.w_img.std() - 1 / math.sqrt(12)) < 0.05
    cfg = TrainerConfig(gamma=0.4, epochs=3)
    path = tmp_path / "enc.json"
    enc.save(path, cfg)
    back, back_cfg = LinearEncoders.load(path)
    assert back.w_img.tobytes() == enc.w_img.tobytes()
    assert back.w_txt.tobytes() == enc.w_txt.tobytes()
    assert back_cfg == cfg

    path.write_text(json.dumps({"w_img": [[1.0]]}))
    with pytest.raises(DataError, match="w_txt"):
        LinearEncoders.load(path)
    with pytest.raises(DataError):
        LinearEncoders(w_img=np.array([[np.inf]]), w_txt=np.array([[1.0]]))


def tiny_dataset(seed=0, n_images=40, n_texts=60):
    return synth_dataset(seed, n_images, n_texts, 8, [0], skew=0.7, mu=1.5)


def test_train_is_deterministic():
    cfg = TrainerConfig(gamma=0.2, alpha=0.5, lr=0.01, epochs=2, batch_size=16, seed=3, emb_dim=6)
    ds = tiny_dataset()
    a = train(ds, cfg)
    b = train(ds, cfg)
    assert a.w_img.tobytes() == b.w_img.tobytes()
    assert a.w_txt.tobytes() == b.w_txt.tobytes()


def test_train_lr_zero_keeps_initialization():
    ds = tiny_dataset()
    frozen = train(ds, TrainerConfig(lr=0.0, epochs=2, batch_size=16, seed=5, emb_dim=6))
    init_only = train(ds, TrainerConfig(lr=0.01, epochs=0, batch_size=16, seed=5, emb_dim=6))
    assert frozen.w_img.tobytes() == init_only.w_img.tobytes()
    assert frozen.w_txt.tobytes() == init_only.w_txt.tobytes()


def test_train_epoch_log_and_learning():
    ds = tiny_dataset()
    rows = []
    cfg = TrainerConfig(gamma=0.2, alpha=0.4, lr=0.02, epochs=6, batch_size=16, seed=1, emb_dim=6)
    train(ds, cfg, on_epoch=rows.append)
    assert [r["epoch"] for r in rows] == list(range(1, 7))
    assert set(rows[0]) == {"epoch", "total_loss", "val_recall_at_10", "val_bias_at_10"}
    assert rows[-1]["total_loss"] < rows[0]["total_loss"]


def test_train_zero_val_frac_gives_nan_metrics():
    rows = []
    train(
        tiny_dataset(),
        TrainerConfig(epochs=1, batch_size=16, emb_dim=6),
        val_frac=0.0,
        on_epoch=rows.append,
    )
    assert math.isnan(rows[0]["val_recall_at_10"])


def test_train_text_labels_override_changes_training():
    ds = tiny_dataset()
    cfg = TrainerConfig(gamma=0.2, alpha=1.0, lr=0.02, epochs=2, batch_size=16, seed=2, emb_dim=6)
    default_run = train(ds, cfg)
    flagged = {tid: GenderLabel.NEUTRAL for tid in ds.texts.ids}
    neutral_run = train(ds, cfg, text_labels=flagged)
    assert default_run.w_img.tobytes() != neutral_run.w_img.tobytes()


def test_train_requires_truth_for_every_text():
    ds = tiny_dataset()
    truth = dict(ds.truth)
    truth.pop(list(ds.texts.ids)[0])
    broken = Dataset(images=ds.images, texts=ds.texts, labels=ds.labels, truth=truth)
    with pytest.raises(DataError, match="truth"):
        train(broken, TrainerConfig(epochs=1, batch_size=16, emb_dim=6))


def test_train_validation():
    ds = tiny_dataset()
    with pytest.raises(DataError):
        train(ds, TrainerConfig(epochs=1, batch_size=16, emb_dim=6), val_frac=1.0)
    tiny = synth_dataset(0, 2, 1, 4)
    with pytest.raises(DataError):
        train(tiny, TrainerConfig(epochs=1, batch_size=16, emb_dim=6))
