"""Acceptance criteria, one test each.

Every test records a ``criterion N: PASS|FAIL ...`` line that is printed in
the pytest terminal summary (see conftest.py). Running this file directly
prints the same lines.
"""

import math
import time

import numpy as np
import pytest

import conftest
from oracles import binomial_band, brute_force_macro_f1
from vnaw.augment import Clip, frame_skip, pixel_erase
from vnaw.cli import main as cli_main
from vnaw.data import GenConfig, LabeledClip, generate_dataset, read_clip, write_clip
from vnaw.loss import NawParams, naw_weight
from vnaw.metrics import ConfusionCounts, macro_f1
from vnaw.model import clip_probability
from vnaw.tensors import RngStream, softmax
from vnaw.train import ABLATION_GEN, ABLATION_TRAIN, TrainConfig, check_gradients, fit, run_ablation
from vnaw.train import split_dataset, tiny_problem


def report(n, name, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {name} ({detail})"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_1_gradient_oracle():
    t0 = time.perf_counter()
    params, clip, y = tiny_problem(0)
    cfg = params.config
    shape_ok = (clip.num_frames, cfg.dim, cfg.heads, cfg.blocks, cfg.classes, cfg.height, cfg.width) == (
        3, 8, 2, 1, 4, 6, 6)
    on = check_gradients(params, clip, y, NawParams.create(cfg.classes), step=1e-5)
    off = check_gradients(params, clip, y, None, step=1e-5)
    dt = time.perf_counter() - t0
    ok = shape_ok and on <= 1e-4 and off <= 1e-4 and dt < 60 and params["embed.w"].dtype == np.float64
    report(1, "gradient oracle", ok, f"max rel err naw on {on:.2e}, off {off:.2e}, tol 1e-4, {dt:.1f}s < 60s")


def test_2_simplex_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_sum, min_entry = 0.0, 1.0
    for i in range(10_000):
        k = int(rng.integers(2, 12))
        scale = 10.0 ** rng.uniform(-3, 3)
        if i % 2 == 0:
            out = softmax(rng.standard_normal(k) * scale)
        else:
            frames = softmax(rng.standard_normal((int(rng.integers(1, 20)), k)) * scale, axis=-1)
            out = clip_probability(frames)
        worst_sum = max(worst_sum, abs(math.fsum(out) - 1.0))
        min_entry = min(min_entry, float(out.min()))
    dt = time.perf_counter() - t0
    ok = worst_sum <= 1e-9 and min_entry >= 0 and dt < 10
    report(2, "simplex suite", ok, f"max |sum-1| {worst_sum:.1e}, min entry {min_entry:.1e}, {dt:.1f}s < 10s")


def test_3_augmentation_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    exact = True
    for i in range(1000):
        p, c, h, w = (int(v) for v in rng.integers(1, [12, 4, 33, 33], endpoint=True))
        values = rng.uniform(0.01, 1.0, size=(p, c, h, w))
        out, mask = pixel_erase(Clip(values), 0.2, RngStream(3, i))
        expected = (2 * h * w) // 10  # floor(0.2 * H * W) in integers
        zeroed = np.all(out.values == 0, axis=1)  # (P, H, W)
        same_set = all(np.array_equal(zeroed[j], zeroed[0]) for j in range(p))
        exact &= mask.count == expected and int(zeroed[0].sum()) == expected and same_set
        exact &= bool(np.array_equal(out.values[:, :, ~zeroed[0]], values[:, :, ~zeroed[0]]))
    clip = Clip(np.ones((100, 1, 1, 1)))
    kept = sum(frame_skip(clip, 0.3, RngStream(30, t))[0].num_frames for t in range(10_000))
    rate = kept / 1_000_000
    lo, hi = binomial_band(1_000_000, 0.7)
    dt = time.perf_counter() - t0
    ok = exact and lo <= rate <= hi and dt < 30
    report(3, "augmentation exactness", ok,
           f"erase sets exact {exact}, retention {rate:.5f} in [{lo:.5f}, {hi:.5f}], {dt:.1f}s < 30s")


def test_4_naw_analytics():
    naw = NawParams.create(2, mu=[0.5, 0.5], sigma=0.5)
    peak_exact = float(naw_weight(naw.mu, naw)) == naw.norm_const
    w = float(naw_weight(np.array([0.9, 0.1]), naw))
    example_ok = abs(w - 0.33574) <= 1e-5
    rng = np.random.default_rng(4)
    sym = True
    for _ in range(1000):
        k = int(rng.integers(2, 9))
        u = NawParams.create(k, sigma=float(rng.uniform(0.2, 1.0)))
        p = rng.dirichlet(np.ones(k))
        base = naw_weight(p, u)
        sym &= all(naw_weight(p[rng.permutation(k)], u) == base for _ in range(5))
    ok = peak_exact and example_ok and sym
    report(4, "NAW analytics", ok,
           f"w*(mu)==C {peak_exact}, K=2 example {w:.8f} vs 0.33574 +- 1e-5 (|diff| {abs(w - 0.33574):.2e}), "
           f"permutation symmetry {sym}")


def test_5_metric_oracle():
    rng = np.random.default_rng(5)
    agree = True
    for _ in range(1000):
        n = int(rng.integers(1, 501))
        preds, truths = rng.integers(0, 8, n), rng.integers(0, 8, n)
        ours = macro_f1(ConfusionCounts.from_predictions(preds, truths, 8))
        agree &= ours == brute_force_macro_f1(preds.tolist(), truths.tolist(), 8)
    truths = np.repeat(np.arange(8), 9)
    const = macro_f1(ConfusionCounts.from_predictions(np.zeros_like(truths), truths, 8))
    ok = agree and abs(const - 0.02778) <= 1e-5
    report(5, "metric oracle", ok, f"exact agreement on 1000 sets {agree}, constant predictor {const:.6f}")


def test_6_determinism(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli_main(["gen-data", "--out", str(data), "--clips", "160", "--noise", "0.2", "--imbalance", "4",
                     "--seed", "6"]) == 0
    outputs = []
    for tag in "ab":
        ckpt, log = tmp_path / f"{tag}.ckpt", tmp_path / f"{tag}.csv"
        code = cli_main(["train", "--data", str(data), "--out", str(ckpt), "--log", str(log), "--epochs", "2",
                         "--augment", "--naw", "--seed", "11"])
        assert code == 0
        outputs.append((ckpt.read_bytes(), log.read_bytes()))
    capsys.readouterr()
    same_ckpt = outputs[0][0] == outputs[1][0]
    same_log = outputs[0][1] == outputs[1][1]
    report(6, "determinism", same_ckpt and same_log,
           f"checkpoints identical {same_ckpt} ({len(outputs[0][0])} bytes), logs identical {same_log}")


@pytest.mark.slow
def test_7_ablation_direction():
    t0 = time.perf_counter()
    gen = ABLATION_GEN
    task_ok = (gen.classes, gen.imbalance, gen.noise, gen.clips, gen.frames, gen.height, gen.width) == (
        8, 4.0, 0.2, 1600, 16, 16, 16)
    table = run_ablation(gen, ABLATION_TRAIN, seeds=range(5))
    dt = time.perf_counter() - t0
    vanilla, aug, naw, both = table.macro
    ok = task_ok and naw >= vanilla and both >= vanilla and dt < 1800
    report(7, "ablation direction", ok,
           f"macro-F1 over 5 seeds: vanilla {vanilla:.4f}, aug {aug:.4f}, naw {naw:.4f}, both {both:.4f}; "
           f"{dt:.0f}s < 1800s")


def test_8_learnability():
    items = generate_dataset(GenConfig(noise=0.0, imbalance=1.0))
    train, val = split_dataset(items)
    cfg = TrainConfig(epochs=20)
    _, history = fit(train, val, cfg, 8)
    best = history[-1].val_f1
    ok = len(history) == 20 and best >= 0.80
    report(8, "learnability", ok, f"val macro-F1 after 20 epochs {best:.4f} >= 0.80")


def test_9_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    exact = True
    edges = [(1, 1, 1, 1), (1, 3, 5, 7), (6, 2, 1, 1), (1, 1, 16, 16)]
    for i in range(1000):
        shape = edges[i] if i < len(edges) else tuple(int(v) for v in rng.integers(1, [9, 4, 17, 17], endpoint=True))
        values = rng.standard_normal(shape).astype(np.float32) * float(10.0 ** rng.uniform(-5, 5))
        label = int(rng.integers(0, 2**16))
        path = tmp_path / f"c{i}.vclp"
        write_clip(LabeledClip(Clip(values), label, "c"), path)
        back = read_clip(path)
        exact &= back.label == label and back.clip.values.shape == shape
        exact &= back.clip.values.tobytes() == values.tobytes()
    report(9, "round-trip", exact, f"1000 clips incl. P=1 and 1x1 frames bit-exact {exact}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
