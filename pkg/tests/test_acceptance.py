"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``acceptance N: PASS|FAIL`` line (also collected
in the pytest terminal summary) and fails if its bar is not met.
"""

import os
import time
from dataclasses import replace

import numpy as np
import pytest

from pyrquant.config import make_config
from pyrquant.dataio import SyntheticSpec, generate_synthetic
from pyrquant.numerics import finite_diff_check
from pyrquant.pipeline import make_split, run_single
from pyrquant.pooling import FeatureMapSet, gsp_grad, gsp_pool, pool_stages
from pyrquant.quantization import Codebook, code_bits, hard_encode, quant_backward, soft_quantize
from pyrquant.retrieval import (RetrievalIndex, aqd_direct, aqd_scores, aqd_search_batch,
                                encode_database, index_layout, load_index, map_eval, p_at_n,
                                query_subvectors, save_index, speed_benchmark)
from pyrquant.training import HyperParams, ModelParams, backward_batch, forward_batch

RHO_SEQUENCE = (1, 2, 4, 8, 16, 32, 64)


# ---------------------------------------------------------------- 1 and 2


def test_01_gsp_limit_identities(verdict):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst_mean, monotone, worst_limit = 0.0, True, 0.0
    for _ in range(100):
        H, W, C = rng.integers(1, 9, 3)
        F = rng.uniform(0, 5, (H, W, C))
        worst_mean = max(worst_mean, np.max(np.abs(gsp_pool(F, 1.0) - F.mean(axis=(0, 1)))))
        seq = np.array([gsp_pool(F, r) for r in RHO_SEQUENCE])
        # the pooled value moves monotonically toward max/HW as rho grows (from above)
        monotone &= bool(np.all(np.diff(seq, axis=0) <= 1e-12 * np.abs(seq[:-1])))
        limit = F.max(axis=(0, 1)) / (H * W)
        worst_limit = max(worst_limit, np.max(seq[-1] / limit - 1))
    elapsed = time.perf_counter() - t0
    ok = worst_mean <= 1e-12 and monotone and worst_limit <= 0.05 and elapsed < 1.0
    verdict(1, ok, f"rho=1 vs mean {worst_mean:.1e} (<=1e-12), monotone in rho={monotone}, "
                   f"rho=64 within {100 * worst_limit:.2f}% of max/HW (<=5%), {elapsed:.2f}s (<1s)")


def test_02_gsp_gradient_oracle(verdict):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        H, W, C = rng.integers(1, 6, 3)
        F = rng.uniform(0.1, 3.0, (H, W, C))
        for rho in (1.0, 2.0, 3.0):
            g = gsp_grad(F, rho)
            # gsp_pool is separable per channel, so summing the outputs gives each
            # entry's own partial derivative
            worst = max(worst, finite_diff_check(lambda: float(gsp_pool(F, rho).sum()), F, g))
    elapsed = time.perf_counter() - t0
    verdict(2, worst <= 1e-5 and elapsed < 10, f"max relative error {worst:.2e} (<=1e-5), "
                                               f"{elapsed:.2f}s (<10s)")


# --------------------------------------------------------------------- 3


def test_03_end_to_end_gradient(verdict):
    rng = np.random.default_rng(3)
    shapes = ((3, 3, 3), (2, 2, 4), (1, 2, 5))
    batch = [FeatureMapSet(*[rng.uniform(0.1, 2.0, s) for s in shapes]) for _ in range(2)]
    labels = [0, 1]
    t0 = time.perf_counter()
    worst, per_kappa = 0.0, {}
    for kappa in (1, 2, 3):
        hyper = HyperParams(c2=3, c3=4, c4=5, D=4, M=2, K=3, num_classes=2, kappa=kappa)
        params = ModelParams.init(hyper, seed=kappa)
        pooled = pool_stages(batch, hyper.rhos)
        grads = backward_batch(params, forward_batch(params, pooled, labels))
        kappa_worst = 0.0
        for name, arr in params.named_params().items():
            err = finite_diff_check(lambda: forward_batch(params, pooled, labels).loss, arr,
                                    grads[name], h=1e-4)
            kappa_worst = max(kappa_worst, err)
        per_kappa[kappa] = kappa_worst
        worst = max(worst, kappa_worst)
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"kappa={k}: {v:.1e}" for k, v in per_kappa.items())
    verdict(3, worst <= 1e-4 and elapsed < 30, f"max relative error {detail} (<=1e-4), "
                                               f"{elapsed:.2f}s (<30s)")


# --------------------------------------------------------------------- 4


def test_04_quantization_equivalences(verdict):
    rng = np.random.default_rng(4)
    bitwise, worst_sum, zero_grad = True, 0.0, True
    for _ in range(200):
        M, K, d, N = rng.integers(1, 4), rng.integers(2, 10), rng.integers(1, 5), rng.integers(1, 5)
        cb = Codebook(rng.standard_normal((M, K, d)))
        z = rng.standard_normal((N, M * d))
        up = rng.standard_normal(z.shape)
        alpha = float(rng.uniform(0.5, 32))
        plain, c_plain = soft_quantize(z, cb, alpha, None)
        full, c_full = soft_quantize(z, cb, alpha, int(K))
        bitwise &= plain.tobytes() == full.tobytes()
        bitwise &= all(a.tobytes() == b.tobytes() for a, b in
                       zip(quant_backward(c_plain, up), quant_backward(c_full, up)))
        kappa = int(rng.integers(1, K + 1))
        _, cache = soft_quantize(z, cb, alpha, kappa)
        worst_sum = max(worst_sum, float(np.max(np.abs(cache.refined.sum(axis=-1) - 1))))
        g_raw, _ = quant_backward(cache, up)
        # a codeword is untouched only if every item in the batch masked it out
        never_used = ~np.any(cache.mask == 1, axis=0)
        zero_grad &= bool(np.all(g_raw[never_used] == 0.0))
        if N == 1:
            zero_grad &= bool(np.all(g_raw[cache.mask[0] == 0] == 0.0))
    ok = bitwise and worst_sum <= 1e-10 and zero_grad
    verdict(4, ok, f"kappa=K bitwise={bitwise}, refined sums off by {worst_sum:.1e} (<=1e-10), "
                   f"masked gradients exactly zero={zero_grad}, 200 cases")


# --------------------------------------------------------------------- 5


def test_05_aqd_correctness(verdict):
    rng = np.random.default_rng(5)
    worst, exact_rank = 0.0, True
    for case in range(20):
        M, K = (2, 4)[case % 2], (8, 16)[(case // 2) % 2]
        n, d = int(rng.integers(1, 501)), int(rng.integers(1, 6))
        cb = Codebook(rng.standard_normal((M, K, d)))
        index = encode_database(rng.standard_normal((n, M * d)), cb, rng.integers(0, 5, n))
        queries = rng.standard_normal((3, M * d))
        table = aqd_scores(queries, index)
        rows, _ = aqd_search_batch(queries, index, n)
        for q in range(len(queries)):
            direct = aqd_direct(query_subvectors(queries[q], M), index.codewords, index.codes)
            worst = max(worst, float(np.max(np.abs(table[q] - direct))))
            oracle = sorted(range(n), key=lambda i: (-direct[i], i))
            exact_rank &= rows[q].tolist() == oracle
    verdict(5, worst <= 1e-9 and exact_rank, f"lookup vs direct {worst:.1e} (<=1e-9), "
                                             f"ranking equals brute force={exact_rank}, 20 indexes")


# --------------------------------------------------------------------- 6


def naive_map(rankings, q_labels, db_labels):
    aps = []
    for ranking, y in zip(rankings, q_labels):
        n_rel = sum(1 for lab in db_labels if lab == y)
        if n_rel == 0:
            continue
        hits, total = 0, 0.0
        for r, item in enumerate(ranking, start=1):
            if db_labels[item] == y:
                hits += 1
                total += hits / r
        aps.append(total / n_rel)
    return float(np.mean(aps))


def naive_precision(rankings, q_labels, db_labels, n):
    return float(np.mean([sum(1 for i in r[:n] if db_labels[i] == y) / n
                          for r, y in zip(rankings, q_labels)]))


def test_06_metric_oracle(verdict):
    rng = np.random.default_rng(6)
    hand = map_eval([[0, 1, 2]], [1], [1, 0, 1])
    equal = True
    for _ in range(50):
        n_db, n_q = int(rng.integers(2, 120)), int(rng.integers(1, 12))
        db_labels = rng.integers(0, 4, n_db)
        q_labels = np.array([db_labels[rng.integers(n_db)] for _ in range(n_q)])
        rankings = [rng.permutation(n_db) for _ in range(n_q)]
        equal &= map_eval(rankings, q_labels, db_labels) == naive_map(rankings, q_labels, db_labels)
        ns = sorted({1, n_db, int(rng.integers(1, n_db + 1))})
        got = p_at_n(rankings, q_labels, db_labels, ns)
        equal &= all(got[n] == naive_precision(rankings, q_labels, db_labels, n) for n in ns)
    ok = equal and abs(hand - 5 / 6) <= 5e-5 and round(hand, 4) == 0.8333
    verdict(6, ok, f"exact equality with naive MAP and P@N over 50 instances={equal}, "
                   f"hand case AP={hand:.4f} (0.8333)")


# --------------------------------------------------------------------- 7


@pytest.fixture(scope="module")
def default_synthetic():
    return generate_synthetic(SyntheticSpec(seed=0)).dataset


def desk_config(**changes):
    cfg = make_config({"m_values": [4], "kappa": 5, "alpha": 16.0}, preset="desk")
    return replace(cfg, **changes)


def test_07_desk_scale_learning(verdict, default_synthetic):
    ds = default_synthetic
    cfg = desk_config()
    assert (cfg.D, cfg.K, cfg.epochs) == (64, 16, 30)
    t0 = time.perf_counter()
    report = run_single(cfg, ds, make_split(cfg, ds), 4)
    elapsed = time.perf_counter() - t0
    ratio = report["map"] / report["exact_map"]
    verdict(7, ratio >= 0.90 and elapsed < 300,
            f"quantized MAP {report['map']:.4f} / exact MAP {report['exact_map']:.4f} = "
            f"{ratio:.3f} (>=0.90), {elapsed:.1f}s (<300s)")


# --------------------------------------------------------------------- 8


@pytest.mark.slow
def test_08_speed(verdict):
    n, D, M, K, n_q = 100_000, 1536, 8, 256, 1000
    rng = np.random.default_rng(8)
    database = rng.standard_normal((n, D), dtype=np.float32)
    cb = Codebook(rng.standard_normal((M, K, D // M)))
    codes = np.concatenate([hard_encode(database[s:s + 10_000].astype(np.float64), cb)
                            for s in range(0, n, 10_000)])
    index = RetrievalIndex(cb.effective().astype(np.float32), codes, np.zeros(n, dtype=np.int64),
                           [f"{i:06d}" for i in range(n)])
    queries = rng.standard_normal((n_q, D), dtype=np.float32)
    reps = int(os.environ.get("PYRQUANT_SPEED_REPS", "3"))
    rep = speed_benchmark(index, database, queries, repetitions=reps, top=100)
    verdict(8, rep["speedup"] >= 5.0,
            f"median per 1000 queries: AQD {rep['aqd_seconds_per_1k']:.3f}s, exact "
            f"{rep['exact_seconds_per_1k']:.3f}s, speedup {rep['speedup']:.1f}x (>=5x), "
            f"{reps} repetitions")


# --------------------------------------------------------------------- 9


@pytest.mark.slow
def test_09_directional_ablations(verdict, default_synthetic):
    ds = default_synthetic
    seeds = range(5)
    means = {}
    for name in ("default", "gap", "gmp", "full_attn"):
        maps = []
        for s in seeds:
            cfg = desk_config(variant=name, seed=s)
            maps.append(run_single(cfg, ds, make_split(cfg, ds), 4)["map"])
        means[name] = float(np.mean(maps))
    ordering = means["default"] >= means["gap"] >= means["gmp"]
    gate = means["default"] >= means["full_attn"] - 0.01
    verdict(9, gate,
            f"mean MAP kappa=5 {means['default']:.4f} vs kappa=K {means['full_attn']:.4f} "
            f"(>= -0.01); advisory GSP {means['default']:.4f} >= GAP {means['gap']:.4f} >= "
            f"GMP {means['gmp']:.4f}: {'holds' if ordering else 'does not hold'}, 5 seeds")


# -------------------------------------------------------------------- 10


def test_10_storage_contract(verdict, tmp_path):
    rng = np.random.default_rng(10)
    exact = True
    cases = [(1000, 4, 256, 16), (777, 3, 16, 4), (123, 8, 5, 2), (1, 1, 2, 1), (0, 2, 8, 2)]
    for n, M, K, d in cases:
        cb = Codebook(rng.standard_normal((M, K, d)))
        index = encode_database(rng.standard_normal((n, M * d)), cb, rng.integers(0, 3, n))
        path = tmp_path / f"{n}_{M}_{K}.pqx"
        save_index(path, index)
        lay = index_layout(M, K, d, n)
        id_bytes = sum(2 + len(str(i).encode()) for i in index.ids)
        code_section = path.stat().st_size - lay["header"] - lay["codebook"] - lay["labels"] - id_bytes
        bits = n * M * code_bits(K)
        exact &= index.payload_bits == bits
        exact &= code_section == (bits + 7) // 8
        back = load_index(path)
        exact &= bool(np.array_equal(back.codes, index.codes))
    verdict(10, exact, f"code payload equals N*M*ceil(log2 K) bits (byte-padded) in "
                       f"{len(cases)} index files={exact}")
