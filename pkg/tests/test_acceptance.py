"""Acceptance suite: one test, and one PASS/FAIL summary line, per criterion.

Run alone with ``pytest tests/test_acceptance.py`` (about four minutes on one
core; criterion 4 dominates) or ``python tests/test_acceptance.py``.
"""

import math
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from skipfuse import tensor as T
from skipfuse.config import ModelConfig
from skipfuse.data import sample_batch, synthetic_pairs
from skipfuse.gradcheck_suite import run_suite
from skipfuse.objectives import (MemoryQueue, MomentumEncoderPair, SkipFuseModel, encode_batch,
                                 greedy_decode, itm_loss, joint_step, mlm_loss, momentum_update,
                                 similarity_matrix)
from skipfuse.optim import make_optimizer
from skipfuse.perf import benchmark_forward, flop_count, fusion_config, measured_flops, zero_memory_estimate
from skipfuse.train import train, train_rng

BASE = dict(d=768, m_len=257, n_len=31, layers=6)


def test_criterion_1_gradient_correctness(criterion):
    with criterion(1, "grad_check on every layer type and loss, 3 seeds, float64", 120) as c:
        results = dict(run_suite(seeds=(0, 1, 2)))
        expected = {"self_attention", "cross_attention", "feed_forward", "layer_norm",
                    "encoder_block", "asymmetric_coattention_layer", "connected_attention_layer",
                    "coattention_layer", "decoder_block", "itc_loss", "itm_loss", "mlm_loss",
                    "prefix_lm_loss"}
        covered = {name.split("[")[0] for name in results}
        c.check(covered == expected, f"cases {sorted(covered ^ expected)} missing or unexpected")
        c.check(len(results) == 3 * len(expected), "not every case ran on 3 seeds")
        worst_name = max(results, key=results.get)
        c.check(results[worst_name] < 1e-4, f"{worst_name} error {results[worst_name]:.2e}")
        c.note(f"max relative error {results[worst_name]:.2e} at {worst_name}")


def test_criterion_2_flop_model_fidelity(criterion):
    grid = [(16, 9, 5, 2, 2), (64, 65, 9, 4, 2), (768, 257, 31, 6, 6)]
    with criterion(2, "analytical FLOPs vs counted multiplies, 4 variants x 3 dims", 60) as c:
        worst = 0.0
        for variant in ("skip", "connected", "coattn", "asym"):
            for d, m, n, layers, stride in grid:
                counted = measured_flops(variant, d, m, n, layers, stride)
                formula = flop_count(variant, d, m, n, layers, stride)
                rel = abs(formula - counted) / counted
                worst = max(worst, rel)
                c.check(rel <= 0.01, f"{variant} d={d}: {formula} vs {counted}")
        c.note(f"worst relative gap {worst:.2e}")


def test_criterion_3_analytical_efficiency(criterion):
    with criterion(3, "skip(S=6) <= 0.5x connected and coattn FLOPs; monotone in S") as c:
        skip = flop_count("skip", stride=6, **BASE)
        conn = flop_count("connected", **BASE)
        co = flop_count("coattn", **BASE)
        c.check(skip <= 0.5 * conn, f"skip/connected = {skip / conn:.3f}")
        c.check(skip <= 0.5 * co, f"skip/coattn = {skip / co:.3f}")
        by_stride = [flop_count("skip", stride=s, **BASE) for s in (1, 2, 3, 6)]
        c.check(all(a > b for a, b in zip(by_stride, by_stride[1:])), f"not decreasing: {by_stride}")
        c.note(f"skip/connected {skip / conn:.3f}, skip/coattn {skip / co:.3f}, "
               f"S=1/S=6 {by_stride[0] / by_stride[-1]:.2f}")


def test_criterion_4_measured_efficiency(criterion):
    with criterion(4, "measured 100-sample forward time, skip(S=6) >= 1.5x faster", 600) as c:
        times = {}
        for variant in ("skip", "connected", "coattn"):
            cfg = fusion_config(768, 6, 6)
            rec = benchmark_forward(variant, cfg, 257, 31, samples=100, warmup=5)
            c.check(rec.samples == 100 and rec.wall_seconds > 0, f"bad record {rec}")
            times[variant] = rec.wall_seconds
        for other in ("connected", "coattn"):
            ratio = times[other] / times["skip"]
            c.check(ratio >= 1.5, f"{other}/skip = {ratio:.2f}")
        c.note(", ".join(f"{k} {v:.2f}s" for k, v in times.items())
               + f"; ratios {times['connected'] / times['skip']:.2f}, {times['coattn'] / times['skip']:.2f}")


def test_criterion_5_training_smoke(criterion):
    with criterion(5, "200 joint steps on 64 pairs cut total loss >= 30%; init ITM=ln2, MLM=lnV", 300) as c:
        cfg = ModelConfig(seed=0)
        data = synthetic_pairs(64, cfg, seed=0)
        probe = SkipFuseModel(cfg)
        for head in (probe.itm_head, probe.mlm_head):
            head.weight.data[:] = 0.0
            head.bias.data[:] = 0.0
        batch = sample_batch(data, 8, np.random.default_rng(0))
        enc = encode_batch(probe, batch)
        itm = itm_loss(probe, enc, similarity_matrix(probe, enc), "sample", np.random.default_rng(0)).item()
        mlm = mlm_loss(batch, probe, np.random.default_rng(0)).item()
        c.check(abs(itm - math.log(2)) < 1e-3, f"ITM at init {itm:.6f}")
        c.check(abs(mlm - math.log(cfg.vocab_size)) < 1e-3, f"MLM at init {mlm:.6f}")

        _, history = train(cfg, 200, data=data)
        totals = [h["total"] for h in history]
        tail = float(np.mean(totals[-10:]))
        c.check(tail <= 0.7 * totals[0], f"last-10 mean {tail:.3f} vs step 1 {totals[0]:.3f}")
        c.check(totals[-1] <= 0.7 * totals[0], f"step 200 {totals[-1]:.3f} vs step 1 {totals[0]:.3f}")
        c.note(f"step 1 {totals[0]:.3f}, step 200 {totals[-1]:.3f}, last-10 mean {tail:.3f} "
               f"({1 - tail / totals[0]:.0%} drop)")


def test_criterion_6_overfit_single_pair(criterion):
    with criterion(6, "500 steps on one pair, greedy decode reproduces the caption", 180) as c:
        # ITM needs a second pair to draw negatives from, so its weight is zero here
        cfg = ModelConfig(seed=0, loss_weights=(1.0, 0.0, 1.0, 1.0))
        data = synthetic_pairs(1, cfg, seed=0)
        model = SkipFuseModel(cfg)
        opt = make_optimizer("sgd", model.trainable_parameters(), None)
        rng = train_rng(cfg)
        for _ in range(500):
            joint_step(data, model, opt, rng)
        caption = [int(t) for t in data.captions[0]]
        decoded = greedy_decode(data.images[0], [], model, cfg.max_text_len)
        c.check(decoded == caption, f"decoded {decoded} != caption {caption}")
        c.note(f"decoded {decoded}")


def test_criterion_7_queue_and_momentum(criterion):
    with criterion(7, "queue FIFO over 1000 sequences, geometric momentum, frozen momentum grads") as c:
        rng = np.random.default_rng(7)
        mismatches = 0
        for _ in range(1000):
            cap = int(rng.integers(1, 17))
            q, ref = MemoryQueue(cap, 4), []
            for _ in range(int(rng.integers(1, 12))):
                n = int(rng.integers(0, 2 * cap + 1))
                rows = rng.normal(size=(n, 4))
                rows = (rows / np.linalg.norm(rows, axis=1, keepdims=True)).astype(np.float32)
                q.push(rows)
                ref = (ref + list(rows))[-cap:]
                if not np.array_equal(q.rows(), np.array(ref).reshape(-1, 4)):
                    mismatches += 1
        c.check(mismatches == 0, f"{mismatches} queue states differ from the list model")

        with T.precision(np.float64):
            online = SkipFuseModel(ModelConfig(d_model=8, n_heads=2, n_visual_layers=1,
                                               n_text_layers=1, momentum=0.9))
            pair = online.momentum_pair
            for p in pair.online.parameters():
                p.data = p.data + 1.0
            gaps = []
            for _ in range(50):
                momentum_update(pair)
                gaps.append(max(np.abs(p.data - q.data).max() for p, q in
                                zip(pair.online.parameters(), pair.momentum.parameters())))
            c.check(np.allclose(gaps, 0.9 ** np.arange(1, 51), rtol=1e-9),
                    "momentum gap does not shrink as 0.9^k")

        cfg = ModelConfig(seed=0, d_model=32, n_heads=2)
        model = SkipFuseModel(cfg)
        opt = make_optimizer("sgd", model.trainable_parameters(), None)
        data = synthetic_pairs(16, cfg)
        rng = train_rng(cfg)
        for step in range(10):
            joint_step(sample_batch(data, 4, rng), model, opt, rng)
            graded = [p for p in model.momentum_parameters()
                      if p.requires_grad or (p.grad is not None and np.any(p.grad))]
            c.check(not graded, f"step {step + 1}: {len(graded)} momentum params have gradients")
        c.note("1000 sequences, 50 updates, 10 joint steps")


def test_criterion_8_zero_memory_model(criterion):
    with criterion(8, "ZeRO 1/N bound at N=1,8,16; P=1e6 Adam static = 20 MB") as c:
        for p in (1, 999_983, 10**6, 123_456_789):
            for n in (1, 8, 16):
                est = zero_memory_estimate(p, n, "adam-fp32")
                s, z = est.static_bytes_per_gpu, est.zero_bytes_per_gpu
                c.check(s <= z * n < s + n, f"P={p} N={n}: {z}*{n} vs {s}")
                if n == 1:
                    c.check(z == s, f"P={p}: single GPU {z} != {s}")
        static = zero_memory_estimate(10**6, 1, "adam-fp32").static_bytes_per_gpu
        c.check(static == 20_000_000, f"P=1e6 adam-fp32 static is {static} bytes, not 20,000,000")
        c.note("4 + 4 + 2 x 4 bytes per parameter")


_FUSE_SCRIPT = textwrap.dedent("""
    import hashlib, numpy as np
    from skipfuse.config import ModelConfig
    from skipfuse.fusion import fuse
    cfg = ModelConfig(d_model=64, n_heads=4, n_fusion_asym_layers=6, stride=3, seed=11)
    rng = np.random.default_rng(11)
    out = fuse("skip", rng.normal(size=(17, 64)), rng.normal(size=(7, 64)), cfg)
    print(hashlib.sha256(out.v.data.tobytes() + out.l.data.tobytes()).hexdigest())
""")


def test_criterion_9_determinism(criterion, tmp_path):
    with criterion(9, "bit-identical checkpoints after 50 steps and fused outputs across processes") as c:
        paths = [tmp_path / f"run{i}.ckpt" for i in range(2)]
        for path in paths:
            subprocess.run([sys.executable, "-m", "skipfuse.cli", "train-toy", "--steps", "50",
                            "--seed", "0", "--out", str(tmp_path / "log.tsv"),
                            "--checkpoint", str(path)], check=True)
        blobs = [p.read_bytes() for p in paths]
        c.check(blobs[0] == blobs[1], "checkpoints differ")
        digests = [subprocess.run([sys.executable, "-c", _FUSE_SCRIPT], check=True,
                                  capture_output=True, text=True).stdout.strip() for _ in range(2)]
        c.check(digests[0] == digests[1] and len(digests[0]) == 64, f"fused digests {digests}")
        c.note(f"checkpoint {len(blobs[0])} bytes, fused sha256 {digests[0][:12]}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
