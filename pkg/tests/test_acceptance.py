"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL`` line with the measured
quantity, then asserts at the stated tolerance.
"""

import csv
import math
import os
import time

import numpy as np
import pytest

from mfrflow import tensor as T
from mfrflow.analysis import ablate, analytic_profile
from mfrflow.cli import main
from mfrflow.costvolume import build_cost_volume, build_pyramid
from mfrflow.flowio import read_flo, write_flo
from mfrflow.lookup import LookupConfig, grid_offsets, lookup_motion_feature
from mfrflow.metrics import epe
from mfrflow.mfr import CoefficientNet, MfrConfig, coefficient_forward, patch_offsets, recover
from mfrflow.model import MFRFlowModel, ModelConfig
from mfrflow.synth import make_dataset
from mfrflow.tensor import Tensor
from mfrflow.train import TrainConfig, collate, evaluate, gradcheck_all, train_loop

# Toy-training and ablation budgets, fixed by pilot runs recorded in the ledger.
TOY_STEPS, TOY_TRAIN, TOY_VAL, TOY_LR = 2000, 512, 32, 4e-4
ABLATION_SEEDS = [0, 1, 2, 3, 4]
ABLATION_STEPS, ABLATION_TRAIN, ABLATION_VAL, ABLATION_LR = 1500, 256, 32, 4e-4


def verdict(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ oracles
def volume_oracle(a, b, scale):
    D, H, W = a.shape
    out = np.zeros((H, W, H, W))
    for i in range(H):
        for j in range(W):
            for k in range(H):
                for l in range(W):
                    out[i, j, k, l] = math.fsum(float(a[d, i, j]) * float(b[d, k, l]) for d in range(D)) * scale
    return out


def bilinear_oracle(img, x, y):
    """Zero-padded bilinear read of a 2-D array at (x, y); None when no in-range cell has weight."""
    h, w = img.shape
    if not (-1 < x < w and -1 < y < h):
        return None
    x0, y0 = math.floor(x), math.floor(y)
    fx, fy = x - x0, y - y0
    total = 0.0
    for yy, xx, wt in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x0 + 1, fx * (1 - fy)), (y0 + 1, x0, (1 - fx) * fy), (y0 + 1, x0 + 1, fx * fy)):
        if 0 <= yy < h and 0 <= xx < w:
            total += wt * img[yy, xx]
    return total


def pooled(vol, level):
    H, W, h, w = vol.shape
    f = 2**level
    return vol.reshape(H, W, h // f, f, w // f, f).mean(axis=(3, 5))


def recovery_oracle(m, omega, hists, alpha, window, prefactor):
    """Scalar evaluation of the weighted history fill at every vanished entry."""
    N = len(hists)
    C, H, W = m.shape
    out = m.copy()
    offs = patch_offsets(window)
    for c in range(C):
        for i in range(H):
            for j in range(W):
                if not omega[c, i, j]:
                    continue
                terms = []
                for n in range(N):
                    for o, (dy, dx) in enumerate(offs):
                        y, x = i + dy, j + dx
                        if 0 <= y < H and 0 <= x < W:
                            terms.append(alpha[n, o, i, j] * hists[n][c, y, x])
                s = math.fsum(terms)
                out[c, i, j] = s / (window * N) if prefactor else s
    return out


# --------------------------------------------------------------- criterion 1
def test_criterion_01_cost_volume_oracle(capsys, f64):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        D, H, W = rng.integers(1, 5), rng.integers(1, 9), rng.integers(1, 9)
        a, b = rng.standard_normal((D, H, W)), rng.standard_normal((D, H, W))
        scale = 1.0 / math.sqrt(D)
        got = build_cost_volume(Tensor(a), Tensor(b)).data
        want = volume_oracle(a, b, scale)
        worst = max(worst, float(np.abs(got - want).max() / max(np.abs(want).max(), 1e-30)))
    elapsed = time.perf_counter() - start
    verdict(capsys, 1, worst < 1e-6 and elapsed < 10, f"max rel err {worst:.2e} over 50 instances in {elapsed:.2f} s")


# --------------------------------------------------------------- criterion 2
def test_criterion_02_lookup_oracle(capsys, f64):
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    exact = True
    for _ in range(20):
        H, W = rng.integers(2, 9), rng.integers(2, 9)
        vol = rng.standard_normal((H, W, H, W))
        flow = rng.integers(-4, 5, (2, H, W)).astype(np.float64)
        feat, mask = lookup_motion_feature(build_pyramid(Tensor(vol), 1), flow, LookupConfig(radius=0, levels=1))
        for i in range(H):
            for j in range(W):
                k, l = i + int(flow[1, i, j]), j + int(flow[0, i, j])
                want = vol[i, j, k, l] if (0 <= k < H and 0 <= l < W) else 0.0
                exact &= feat.data.data[0, i, j] == want and mask.valid[0, i, j] == (0 <= k < H and 0 <= l < W)

    worst = 0.0
    cfg = LookupConfig(radius=2, levels=3)
    offsets = grid_offsets(cfg.radius)
    K = len(offsets)
    for _ in range(5):
        H = W = 8
        vol = rng.standard_normal((H, W, H, W))
        flow = rng.uniform(-6, 6, (2, H, W))
        feat, mask = lookup_motion_feature(build_pyramid(Tensor(vol), cfg.levels), flow, cfg)
        got = feat.data.data
        for level in range(cfg.levels):
            pv = pooled(vol, level)
            for i in range(H):
                for j in range(W):
                    cx, cy = (j + flow[0, i, j]) / 2**level, (i + flow[1, i, j]) / 2**level
                    for k, (dx, dy) in enumerate(offsets):
                        want = bilinear_oracle(pv[i, j], cx + dx, cy + dy)
                        ch = level * K + k
                        if want is None:
                            exact &= got[ch, i, j] == 0.0 and not mask.valid[ch, i, j]
                        else:
                            worst = max(worst, abs(got[ch, i, j] - want))
                            exact &= bool(mask.valid[ch, i, j])
    elapsed = time.perf_counter() - start
    ok = exact and worst < 1e-6 and elapsed < 10
    verdict(capsys, 2, ok, f"integer flows exact={exact}, sub-pixel max err {worst:.2e}, {elapsed:.2f} s")


# --------------------------------------------------------------- criterion 3
def test_criterion_03_recovery_literal(capsys, f64):
    m = np.zeros((1, 2, 2))
    omega = np.zeros((1, 2, 2), bool)
    omega[0, 1, 0] = True
    alpha = np.zeros((1, 2, 1, 2, 2))
    alpha[0, 0], alpha[0, 1] = 0.25, 0.75
    hand = recover(Tensor(m), omega, [Tensor(np.full((1, 2, 2), 4.0)), Tensor(np.full((1, 2, 2), 8.0))], Tensor(alpha), MfrConfig()).data
    hand_ok = hand[0, 1, 0] == 3.5

    rng = np.random.default_rng(303)
    worst = 0.0
    for trial in range(100):
        N = int(rng.integers(1, 4))
        window = (1, 9)[trial % 2]
        prefactor = bool(trial % 4 < 2)
        C, H, W = int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
        m = rng.standard_normal((C, H, W))
        omega = rng.random((C, H, W)) < rng.uniform(0.1, 0.9)
        hists = [rng.standard_normal((C, H, W)) for _ in range(N)]
        logits = rng.standard_normal((N * window, H, W))
        alpha = (np.exp(logits) / np.exp(logits).sum(0)).reshape(N, window, H, W)
        cfg = MfrConfig(history_frames=N, window=window, literal_prefactor=prefactor)
        got = recover(Tensor(m), omega, [Tensor(h) for h in hists], Tensor(alpha[None]), cfg).data
        want = recovery_oracle(m, omega, hists, alpha, window, prefactor)
        worst = max(worst, float(np.abs(got - want).max()))
    verdict(capsys, 3, hand_ok and worst < 1e-6, f"hand example {hand[0, 1, 0]} (want 3.5), 100 patterns max err {worst:.2e}")


# --------------------------------------------------------------- criterion 4
def test_criterion_04_valid_entries_preserved(capsys):
    rng = np.random.default_rng(404)
    mismatches = 0
    for trial in range(100):
        window = (1, 9)[trial % 2]
        cfg = MfrConfig(history_frames=2, window=window, hidden=8, literal_prefactor=bool(trial % 3))
        m = Tensor(rng.standard_normal((2, 4, 6, 6)).astype(np.float32))
        hists = [Tensor(rng.standard_normal((2, 4, 6, 6)).astype(np.float32)) for _ in range(2)]
        omega = rng.random((2, 4, 6, 6)) < 0.5
        alpha = coefficient_forward(CoefficientNet(4, cfg, rng), hists)
        out = recover(m, omega, hists, alpha, cfg).data
        mismatches += int(out[~omega].tobytes() != m.data[~omega].tobytes())
    verdict(capsys, 4, mismatches == 0, f"{mismatches} of 100 recoveries altered a valid entry")


# ------------------------------------------------------------ criteria 5 & 6
@pytest.fixture(scope="module")
def nzr_profiles():
    return [analytic_profile(s) for s in make_dataset("large:0.5,occluding:0.5", 50, seed=505)]


def test_criterion_05_nzr_recovery(capsys, nzr_profiles):
    never_lower = all(r >= b for p in nzr_profiles for b, r in zip(p.baseline, p.recovered))
    with_omega = [p for p in nzr_profiles if min(p.baseline) < 1.0]
    strict = sum(np.mean(p.recovered) > np.mean(p.baseline) for p in with_omega)
    frac = strict / len(with_omega) if with_omega else 0.0
    base = np.mean([p.baseline for p in nzr_profiles], axis=0)
    rec = np.mean([p.recovered for p in nzr_profiles], axis=0)
    detail = (
        f"never lower={never_lower}, strictly higher on {strict}/{len(with_omega)} samples with vanished entries; "
        f"mean NZR {np.round(base, 3).tolist()} -> {np.round(rec, 3).tolist()}"
    )
    verdict(capsys, 5, never_lower and frac >= 0.9, detail)


def test_criterion_06_level_ordering(capsys, nzr_profiles):
    base = np.mean([p.baseline for p in nzr_profiles], axis=0)
    ok = bool(np.all(np.diff(base) <= 0))
    verdict(capsys, 6, ok, f"mean baseline NZR by level {np.round(base, 4).tolist()}")


# --------------------------------------------------------------- criterion 7
def test_criterion_07_vanishing_severity(capsys, tmp_path):
    data, out = tmp_path / "large", tmp_path / "profile"
    assert main(["gen-data", "--spec", "large", "--count", "50", "--seed", "707", "--out", str(data)]) == 0
    assert main(["profile-nzr", "--analytic-flow", "--data", str(data), "--out", str(out)]) == 0
    frac = np.array([float(r["sprite_invalid_zero_flow"]) for r in read_csv(out / "severity.csv")])
    ok = len(frac) == 50 and bool(np.all(frac > 0.40))
    verdict(capsys, 7, ok, f"sprite invalid fraction at zero flow: min {frac.min():.3f}, mean {frac.mean():.3f} over {len(frac)}")


# --------------------------------------------------------------- criterion 8
def test_criterion_08_gradcheck(capsys):
    sample = make_dataset("large", 1, seed=808)[0]
    model = MFRFlowModel(ModelConfig(), seed=0)
    # The recovery path only carries gradient when some entry vanishes.
    frames, _, _ = collate([sample])
    with T.no_grad():
        res = model.forward_detailed(frames)
    vanished = not res.forward_valid[-1].all()
    start = time.perf_counter()
    report = gradcheck_all(model, sample)
    elapsed = time.perf_counter() - start
    worst = max(report.errors.values())
    groups = ", ".join(f"{g} {e:.1e}" for g, e in report.errors.items())
    ok = report.passed(1e-5) and "mfr" in report.errors and vanished and elapsed < 300
    verdict(capsys, 8, ok, f"max rel err {worst:.2e} ({groups}) in {elapsed:.0f} s")


# --------------------------------------------------------------- criterion 9
@pytest.fixture(scope="module")
def toy_run():
    train = make_dataset("small", TOY_TRAIN, seed=0)
    val = make_dataset("small", TOY_VAL, seed=1000)
    model = MFRFlowModel(ModelConfig(), seed=0)
    before = evaluate(model, val).mean_epe
    cfg = TrainConfig(lr=TOY_LR, steps=TOY_STEPS, decay_steps=TOY_STEPS, eval_every=0)
    start = time.perf_counter()
    train_loop(cfg, model, train)
    elapsed = time.perf_counter() - start
    return model, val, before, evaluate(model, val).mean_epe, elapsed


def test_criterion_09_toy_training(capsys, toy_run):
    _, _, before, after, elapsed = toy_run
    ok = before > 5.0 and after < 1.0 and elapsed <= 1800
    verdict(capsys, 9, ok, f"held-out EPE {before:.3f} -> {after:.3f} px after {TOY_STEPS} steps in {elapsed / 60:.1f} min")


def test_trained_iterations_refine(toy_run):
    model, val, _, _, _ = toy_run
    with T.no_grad():
        frames, gt, valid = collate(val)
        preds = model.forward_detailed(frames).predictions
    curve = [np.mean([epe(p.data[b], gt[b], valid[b]) for b in range(len(val))]) for p in preds]
    steps = [b <= a for a, b in zip(curve, curve[1:])]
    assert sum(steps) >= 0.8 * len(steps), curve


# -------------------------------------------------------------- criterion 10
def test_criterion_10_ablation_direction(capsys, tmp_path):
    train = make_dataset("occluding", ABLATION_TRAIN, seed=0)
    val = make_dataset("occluding", ABLATION_VAL, seed=1000)
    cfg = TrainConfig(lr=ABLATION_LR, steps=ABLATION_STEPS, decay_steps=ABLATION_STEPS, eval_every=0)
    rows = ablate(ModelConfig(), cfg, train, val, ABLATION_SEEDS, str(tmp_path))
    wins = sum(r.recovery_wins for r in rows)
    table = "; ".join(f"seed {r.seed} on {r.epe_on:.3f} off {r.epe_off:.3f}" for r in rows)
    verdict(capsys, 10, wins >= 4, f"recovery wins {wins}/5 ({table})")


# -------------------------------------------------------------- criterion 11
def test_criterion_11_flo_fidelity(capsys, tmp_path):
    rng = np.random.default_rng(1111)
    exact = 0
    for k in range(100):
        h, w = rng.integers(1, 40, 2)
        flow = (rng.standard_normal((2, h, w)) * 10 ** rng.uniform(-3, 3)).astype(np.float32)
        path = tmp_path / f"f{k}.flo"
        write_flo(path, flow)
        exact += int(read_flo(path).numpy().tobytes() == flow.tobytes())
    write_flo(tmp_path / "one.flo", np.zeros((2, 1, 1), np.float32))
    size = os.path.getsize(tmp_path / "one.flo")
    verdict(capsys, 11, exact == 100 and size == 20, f"{exact}/100 bit-exact round trips, 1x1 file is {size} bytes")


# -------------------------------------------------------------- criterion 12
def test_criterion_12_determinism(capsys, tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--spec", "small:0.5,occluding:0.5", "--count", "8", "--seed", "12", "--out", str(data)]) == 0
    overrides = ["train.steps=6", "train.decay_steps=6", "train.batch_size=2", "train.eval_every=3", "data.val_count=3"]
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        argv = ["train", "--data", str(data), "--out", str(out), "--seed", "5"]
        for kv in overrides:
            argv += ["--set", kv]
        assert main(argv) == 0
        ckpt = out / "checkpoint_000006.mfrw"
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(out / "eval")]) == 0
        outputs.append(out)
    names = ["checkpoint_000000.mfrw", "checkpoint_000006.mfrw", "train_log.csv", "eval_log.csv", "eval/eval.csv"]
    same = [(outputs[0] / n).read_bytes() == (outputs[1] / n).read_bytes() for n in names]
    ok = all(same)
    verdict(capsys, 12, ok, f"{sum(same)}/{len(names)} artefacts bit-identical across repeated runs")
