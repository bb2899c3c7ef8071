import math
from dataclasses import replace

import numpy as np
import pytest

from pyrquant.numerics import StateError, finite_diff_check
from pyrquant.pooling import FeatureMapSet, gsp_pool, pool_stages
from pyrquant.quantization import soft_quantize
from pyrquant.losses import sr_cel
from pyrquant.training import (CheckpointError, HyperParams, ModelParams, TrainConfig,
                               TrainingError, apply_variant, backward_batch, data_init, embed,
                               encode, forward_batch, load_checkpoint, save_checkpoint, train)


def tiny_hyper(**kw):
    base = dict(c2=2, c3=3, c4=3, D=4, M=2, K=3, num_classes=2, alpha=1.5, kappa=None,
                tau=0.5, m_plus=0.1, m_minus=3.0, gamma=1.0)
    base.update(kw)
    return HyperParams(**base)


def tiny_batch(rng, n=2, hyper=None):
    h = hyper or tiny_hyper()
    return [FeatureMapSet(rng.uniform(0.1, 2, (3, 3, h.c2)), rng.uniform(0.1, 2, (2, 2, h.c3)),
                          rng.uniform(0.1, 2, (2, 2, h.c4))) for _ in range(n)]


def straight_line_loss(params, batch, labels):
    """Second implementation of the forward pass with explicit loops."""
    h = params.hyper
    rhos = h.rho
    total_ce, zhats = 0.0, []
    for fms, y in zip(batch, labels):
        a2, a3, a4 = (gsp_pool(x, r) for x, r in zip(fms.stages(), rhos))
        P = params.php
        h2 = P.fc1.weight @ a2 + P.fc1.bias
        h4 = P.fc2.weight @ (h2 + a3) + P.fc2.bias + a4
        z = P.g.weight @ h4 + P.g.bias
        d = h.D // h.M
        parts = []
        for m in range(h.M):
            v = z[m * d:(m + 1) * d]
            v = v / (np.linalg.norm(v) + 1e-12)
            C = params.codebook.raw[m] / (np.linalg.norm(params.codebook.raw[m], axis=1, keepdims=True) + 1e-12)
            s = np.array([2 * h.alpha * float(v @ c) for c in C])
            p = np.exp(s - s.max())
            p /= p.sum()
            if h.kappa is not None and h.kappa < h.K:
                keep = sorted(range(h.K), key=lambda k: (-p[k], k))[:h.kappa]
                q = np.zeros_like(p)
                q[keep] = p[keep]
                p = q / q.sum()
            parts.append(sum(p[k] * C[k] for k in range(h.K)))
        zhat = np.concatenate(parts)
        zhats.append(zhat)
        logits = params.classifier.weight @ zhat + params.classifier.bias
        s = logits / h.tau
        total_ce += -(s[y] - s.max() - math.log(np.exp(s - s.max()).sum()))
    ce = total_ce / len(batch)
    # contrastive with the same aggregation as the library
    zhats = np.array(zhats)
    labels = np.asarray(labels)
    terms = []
    for c in np.unique(labels):
        pos, neg = np.flatnonzero(labels == c), np.flatnonzero(labels != c)
        t = 0.0
        if len(pos) > 1:
            dp = sum(np.linalg.norm(zhats[i] - zhats[j]) for i in pos for j in pos if i != j) / len(pos) ** 2
            t += max(dp - h.m_plus, 0)
        if len(neg):
            dm = sum(np.linalg.norm(zhats[i] - zhats[j]) for i in pos for j in neg) / (len(pos) * len(neg))
            t += max(h.m_minus - dm, 0)
        terms.append(t)
    return ce + h.gamma * float(np.mean(terms))


# ------------------------------------------------------------------ forward


def test_forward_matches_straight_line_oracle(rng):
    for kappa in (None, 1, 2):
        params = ModelParams.init(tiny_hyper(kappa=kappa), seed=1)
        batch = tiny_batch(rng, 3)
        labels = [0, 1, 1]
        res = forward_batch(params, batch, labels)
        assert res.loss == pytest.approx(straight_line_loss(params, batch, labels), rel=1e-10, abs=1e-12)


def test_full_attention_no_contrastive_is_plain_pipeline(rng):
    params = ModelParams.init(tiny_hyper(kappa=3, gamma=0.0), seed=2)
    batch = tiny_batch(rng, 4)
    labels = [0, 1, 0, 1]
    res = forward_batch(params, batch, labels)
    z = embed(params, batch)
    z_hat, _ = soft_quantize(z, params.codebook, params.hyper.alpha, kappa=None)
    logits = z_hat @ params.classifier.weight.T + params.classifier.bias
    assert res.z_hat.tobytes() == z_hat.tobytes()
    assert res.loss == sr_cel(logits, labels, 0.5)[0]


def test_duplicated_sample_gives_identical_rows(rng):
    params = ModelParams.init(tiny_hyper(), seed=3)
    one = tiny_batch(rng, 1)
    res = forward_batch(params, one * 2, [1, 1])
    assert res.z_hat[0].tobytes() == res.z_hat[1].tobytes()
    assert res.logits[0].tobytes() == res.logits[1].tobytes()


def test_forward_rejects_label_count_mismatch(rng):
    from pyrquant.numerics import ShapeError
    params = ModelParams.init(tiny_hyper(), seed=0)
    with pytest.raises(ShapeError):
        forward_batch(params, tiny_batch(rng, 2), [0])


# ----------------------------------------------------------------- backward


def test_backward_zero_upstream(rng):
    params = ModelParams.init(tiny_hyper(kappa=2), seed=4)
    res = forward_batch(params, tiny_batch(rng), [0, 1])
    grads = backward_batch(params, res, upstream=0.0)
    assert set(grads) == set(params.named_params())
    assert all(not g.any() for g in grads.values())


def test_backward_without_forward():
    params = ModelParams.init(tiny_hyper(), seed=0)
    with pytest.raises(StateError):
        backward_batch(params, None)


@pytest.mark.parametrize("kappa", [None, 1, 2, 3])
def test_backward_matches_finite_differences(rng, kappa):
    params = ModelParams.init(tiny_hyper(kappa=kappa), seed=5)
    pooled = pool_stages(tiny_batch(rng), params.hyper.rhos)
    labels = [0, 1]
    grads = backward_batch(params, forward_batch(params, pooled, labels))
    for name, arr in params.named_params().items():
        err = finite_diff_check(lambda: forward_batch(params, pooled, labels).loss, arr, grads[name], h=1e-4)
        assert err <= 1e-4, name


def test_duplicating_batch_keeps_mean_reduced_gradients(rng):
    # with the contrastive term off the loss is a plain per-sample mean
    params = ModelParams.init(tiny_hyper(gamma=0.0, kappa=2), seed=6)
    batch = tiny_batch(rng, 3)
    labels = [0, 1, 0]
    g1 = backward_batch(params, forward_batch(params, batch, labels))
    g2 = backward_batch(params, forward_batch(params, batch * 2, labels * 2))
    for k in g1:
        np.testing.assert_allclose(g2[k], g1[k], rtol=1e-12, atol=1e-15)


def test_masked_codewords_receive_no_gradient(rng):
    params = ModelParams.init(tiny_hyper(kappa=1, gamma=0.0), seed=7)
    res = forward_batch(params, tiny_batch(rng, 1), [0])
    grads = backward_batch(params, res)
    masked = res.cache["quant"].mask[0] == 0
    assert np.all(grads["codebook"][masked] == 0.0)


# ----------------------------------------------------------------- variants


def test_variant_full_attention_equals_kappa_k(rng):
    h = tiny_hyper(kappa=2)
    assert apply_variant(h, "full_attn").kappa == h.K
    pa = ModelParams.init(apply_variant(h, "full_attn"), seed=8)
    pb = ModelParams.init(replace(h, kappa=h.K), seed=8)
    batch = tiny_batch(rng)
    assert forward_batch(pa, batch, [0, 1]).loss == forward_batch(pb, batch, [0, 1]).loss


def test_variant_gap_equals_unit_focus(rng):
    h = tiny_hyper()
    gap = apply_variant(h, "gap")
    assert gap.rho == (1.0, 1.0, 1.0)
    batch = tiny_batch(rng)
    pa = ModelParams.init(gap, seed=9)
    pb = ModelParams.init(replace(h, rho=(1, 1, 1)), seed=9)
    np.testing.assert_array_equal(embed(pa, batch), embed(pb, batch))


def test_other_variants():
    h = tiny_hyper()
    assert apply_variant(h, "gmp").rho == (math.inf,) * 3
    assert apply_variant(h, "ascending").rho == (1.0, 2.0, 3.0)
    assert apply_variant(h, "last_fc").last_only
    assert apply_variant(h, "no_cl").gamma == 0.0
    assert apply_variant(h, "default") == h
    with pytest.raises(ValueError):
        apply_variant(h, "bogus")


@pytest.mark.parametrize("kw", [dict(D=5), dict(kappa=4), dict(K=1), dict(alpha=0), dict(rho=(0.5, 1, 1))])
def test_hyper_validation(kw):
    with pytest.raises(ValueError):
        tiny_hyper(**kw)


def test_bit_budget():
    assert HyperParams(D=1536, M=8, K=256).bits == 64
    assert tiny_hyper().bits == 4


# -------------------------------------------------------------------- train


@pytest.fixture(scope="module")
def small_setup(small_synthetic):
    ds = small_synthetic.dataset
    h = HyperParams(c2=16, c3=32, c4=48, D=16, M=2, K=8, num_classes=6, kappa=3)
    pooled = ds.pooled(h.rhos)
    return h, pooled, ds.labels


def test_zero_epochs_and_zero_lr_leave_params(small_setup):
    h, pooled, labels = small_setup
    p = ModelParams.init(h, seed=0)
    before = {k: v.copy() for k, v in p.named_params().items()}
    train(p, pooled, labels, TrainConfig(epochs=0))
    train(p, pooled, labels, TrainConfig(epochs=2, lr=0.0, batch_size=32))
    for k, v in p.named_params().items():
        assert v.tobytes() == before[k].tobytes()


def test_training_reduces_loss(small_setup):
    h, pooled, labels = small_setup
    for seed in (0, 1):
        p = data_init(ModelParams.init(h, seed=seed), pooled, seed=seed)
        res = train(p, pooled, labels, TrainConfig(epochs=8, batch_size=32, lr=1e-3, seed=seed))
        assert res.history[-1]["loss"] < res.history[0]["loss"]
        assert {"loss", "sr_cel", "contrastive", "epoch"} <= set(res.history[0])


def test_training_is_bitwise_reproducible(small_setup):
    h, pooled, labels = small_setup
    runs = []
    for _ in range(2):
        p = data_init(ModelParams.init(h, seed=4), pooled, seed=4)
        train(p, pooled, labels, TrainConfig(epochs=2, batch_size=25, lr=1e-3, seed=4))
        runs.append(b"".join(v.tobytes() for _, v in sorted(p.named_params().items())))
    assert runs[0] == runs[1]


def test_validation_tracks_best_epoch(small_setup):
    h, pooled, labels = small_setup
    p = ModelParams.init(h, seed=0)
    scores = iter([0.2, 0.7, 0.5])
    res = train(p, pooled, labels, TrainConfig(epochs=3, batch_size=64, lr=1e-3),
                val_fn=lambda _: next(scores))
    assert [r["val_map"] for r in res.history] == [0.2, 0.7, 0.5]
    assert res.best_epoch == 1 and res.best_params is not None


def test_non_finite_loss_names_batch(small_setup):
    h, pooled, labels = small_setup
    p = ModelParams.init(h, seed=0)
    p.classifier.weight[0, 0] = np.nan
    with pytest.raises(TrainingError, match="epoch 0 batch 0"):
        train(p, pooled, labels, TrainConfig(epochs=1, batch_size=32))


def test_train_rejects_empty_and_tiny_batches(small_setup):
    h, pooled, labels = small_setup
    p = ModelParams.init(h, seed=0)
    with pytest.raises(TrainingError):
        train(p, pooled.take(np.array([], dtype=int)), labels[:0], TrainConfig())
    with pytest.raises(ValueError):
        train(p, pooled, labels, TrainConfig(batch_size=1))


def test_data_init_spreads_embeddings(small_setup):
    h, pooled, _ = small_setup
    p = data_init(ModelParams.init(h, seed=0), pooled)
    z = embed(p, pooled)
    np.testing.assert_allclose(z.std(axis=0), 1.0, rtol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(p.codebook.raw, axis=-1), 1.0, rtol=0, atol=1e-12)


def test_encode_returns_codes(small_setup):
    h, pooled, _ = small_setup
    p = ModelParams.init(h, seed=0)
    codes = encode(p, pooled.take(np.arange(5)))
    assert codes.shape == (5, 2) and codes.max() < 8


# --------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_bitwise(tmp_path, small_setup):
    h, pooled, labels = small_setup
    p = ModelParams.init(replace(h, rho=(math.inf, 2, 1)), seed=0)
    res = train(p, pooled, labels, TrainConfig(epochs=1, batch_size=64, lr=1e-3))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, p, res.optimizer, {"note": "x"})
    q, opt, extra = load_checkpoint(path)
    assert q.hyper == p.hyper
    assert extra == {"note": "x"}
    for k, v in p.named_params().items():
        assert q.named_params()[k].tobytes() == v.tobytes()
    assert opt.step_count == res.optimizer.step_count
    for k in res.optimizer.m:
        assert opt.m[k].tobytes() == res.optimizer.m[k].tobytes()
        assert opt.v[k].tobytes() == res.optimizer.v[k].tobytes()


def test_checkpoint_without_optimizer(tmp_path):
    p = ModelParams.init(tiny_hyper(), seed=0)
    save_checkpoint(tmp_path / "a.ckpt", p)
    _, opt, extra = load_checkpoint(tmp_path / "a.ckpt")
    assert opt is None and extra == {}


def test_checkpoint_corruption_detected(tmp_path):
    p = ModelParams.init(tiny_hyper(), seed=0)
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, p)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)
