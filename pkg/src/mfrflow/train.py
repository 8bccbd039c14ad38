"""AdamW optimiser, training loop, evaluation and whole-model gradient checks."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .lookup import nzr
from .metrics import EvalReport, epe, fl_all
from .mfr import corrupt_backward
from .model import MFRFlowModel, sequence_loss, sequence_loss_terms
from .synth import SampleSequence

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Non-finite loss or a failed gradient check."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-4
    decay_steps: int = 2000
    weight_decay: float = 1e-4
    batch_size: int = 4
    steps: int = 2000
    clip_norm: float = 1.0
    seed: int = 0
    weighting: str = "uniform"
    gamma: float = 0.8
    eval_every: int = 500
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("lr", "batch_size", "clip_norm", "gamma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0 or self.weight_decay < 0:
            raise ValueError("steps and weight_decay must be non-negative")
        if self.decay_steps > self.steps and self.steps > 0:
            raise ValueError("decay_steps must not exceed steps")
        if self.weighting not in ("uniform", "exponential"):
            raise ValueError(f"unknown weighting {self.weighting!r}")

    def lr_at(self, step: int) -> float:
        """Linear decay from ``lr`` to zero over ``decay_steps``."""
        if self.decay_steps <= 0:
            return self.lr
        return self.lr * max(0.0, 1.0 - step / self.decay_steps)


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-4,
) -> None:
    """In-place AdamW update with decoupled weight decay.

    theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, theta in params.items():
        g = grads[name]
        if theta.shape != g.shape:
            raise T.ShapeError(f"{name}: gradient {g.shape} does not match parameter {theta.shape}")
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        theta *= theta.dtype.type(1.0 - lr * weight_decay)
        theta -= (lr * update).astype(theta.dtype)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= g.dtype.type(scale)
    return total


def collate(samples: list[SampleSequence], dtype=None):
    dtype = dtype or T.get_default_dtype()
    n_frames = len(samples[0].frames)
    frames = [np.stack([s.frames[k] for s in samples]).astype(dtype) for k in range(n_frames)]
    gt = np.stack([s.gt_flow.numpy() for s in samples]).astype(dtype)
    valid = np.stack([s.valid_mask for s in samples])
    return frames, gt, valid


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def write_csv(self, out_dir) -> None:
        with open(os.path.join(out_dir, "train_log.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "lr", "grad_norm"])
            for row in zip(self.steps, self.losses, self.lrs, self.grad_norms):
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        if self.evals:
            keys = list(self.evals[0])
            with open(os.path.join(out_dir, "eval_log.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(keys)
                for row in self.evals:
                    w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in keys])


def evaluate(model: MFRFlowModel, dataset: list[SampleSequence], batch_size: int = 8) -> EvalReport:
    """Final-iteration EPE / Fl per sample, plus per-level NZR of the last lookup."""
    rows = []
    base_levels, rec_levels = [], []
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            chunk = dataset[start : start + batch_size]
            frames, gt, valid = collate(chunk)
            res = model.forward_detailed(frames)
            pred = res.predictions[-1].data if res.predictions else np.zeros_like(gt)
            for b, s in enumerate(chunk):
                row = {
                    "sample_id": s.sample_id,
                    "regime": s.regime,
                    "epe": epe(pred[b], gt[b], valid[b]),
                    "fl_all": fl_all(pred[b], gt[b], valid[b]),
                }
                if res.forward_valid:
                    levels = model.cfg.levels
                    bl = nzr(res.forward_valid[-1][b], per_level=True, levels=levels)
                    rl = nzr(res.recovered_valid[-1][b], per_level=True, levels=levels) if res.recovered_valid else bl
                    for l in range(levels):
                        row[f"nzr_baseline_l{l + 1}"] = bl[l]
                        row[f"nzr_recovered_l{l + 1}"] = rl[l]
                    base_levels.append(bl)
                    rec_levels.append(rl)
                rows.append(row)
    if not rows:
        return EvalReport(float("nan"), float("nan"))
    return EvalReport(
        mean_epe=float(np.mean([r["epe"] for r in rows])),
        fl_all=float(np.mean([r["fl_all"] for r in rows])),
        rows=rows,
        nzr_baseline=list(np.mean(base_levels, axis=0)) if base_levels else [],
        nzr_recovered=list(np.mean(rec_levels, axis=0)) if rec_levels else [],
    )


def checkpoint_path(out_dir, step: int) -> str:
    return os.path.join(out_dir, f"checkpoint_{step:06d}.mfrw")


def train_loop(
    cfg: TrainConfig,
    model: MFRFlowModel,
    dataset: list[SampleSequence],
    val_set: list[SampleSequence] | None = None,
    out_dir: str | None = None,
) -> TrainLog:
    """Minimise the per-iteration flow loss with AdamW and global-norm clipping.

    Batches are drawn from a seeded permutation of ``dataset`` per epoch.
    Checkpoints go to ``out_dir`` at step 0, every ``checkpoint_every`` steps
    and at the end.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    state = AdamWState()
    tlog = TrainLog()
    params = {k: p.data for k, p in model.params.items()}

    def save(step: int) -> None:
        if out_dir is None:
            return
        path = checkpoint_path(out_dir, step)
        T.save_checkpoint(path, model.state_dict())
        tlog.checkpoints.append(path)

    def run_eval(step: int) -> None:
        if not val_set:
            return
        rep = evaluate(model, val_set, batch_size=max(cfg.batch_size, 8))
        entry = {"step": step, "val_epe": rep.mean_epe, "val_fl": rep.fl_all}
        for l, (b, r) in enumerate(zip(rep.nzr_baseline, rep.nzr_recovered)):
            entry[f"nzr_baseline_l{l + 1}"] = float(b)
            entry[f"nzr_recovered_l{l + 1}"] = float(r)
        tlog.evals.append(entry)
        log.info("step %d val EPE %.3f Fl %.2f%%", step, rep.mean_epe, rep.fl_all)

    save(0)
    order: list[int] = []
    for step in range(1, cfg.steps + 1):
        if len(order) < cfg.batch_size:
            order.extend(int(i) for i in rng.permutation(len(dataset)))
        batch = [dataset[i] for i in order[: cfg.batch_size]]
        del order[: cfg.batch_size]

        frames, gt, valid = collate(batch)
        model.zero_grad()
        preds = model.forward_detailed(frames).predictions
        loss = sequence_loss(preds, gt, valid, cfg.weighting, cfg.gamma)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss {value} at step {step}")
        loss.backward()
        grads = {k: p.grad for k, p in model.params.items()}
        norm = clip_grad_norm(grads, cfg.clip_norm)
        lr = cfg.lr_at(step - 1)
        adamw_step(params, grads, state, lr, weight_decay=cfg.weight_decay)

        tlog.steps.append(step)
        tlog.losses.append(value)
        tlog.lrs.append(lr)
        tlog.grad_norms.append(norm)
        if step % 50 == 0:
            log.debug("step %d loss %.4f |g| %.3f", step, value, norm)
        if cfg.eval_every and step % cfg.eval_every == 0 and step != cfg.steps:
            run_eval(step)
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step != cfg.steps:
            save(step)

    if cfg.steps > 0:
        run_eval(cfg.steps)
        save(cfg.steps)
    if out_dir is not None:
        tlog.write_csv(out_dir)
    return tlog


@dataclass
class GradcheckReport:
    """Worst relative error per parameter group, plus bookkeeping."""

    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)  # coordinates straddling a kink
    worst: dict[str, tuple] = field(default_factory=dict)  # (param, index, analytic, numeric)

    def passed(self, tol: float = 1e-5) -> bool:
        return all(e < tol for e in self.errors.values())


def gradcheck_all(
    model: MFRFlowModel,
    sample: SampleSequence,
    eps: float = 1e-3,
    coords_per_group: int = 50,
    seed: int = 0,
    corrupt: float | None = None,
    abs_floor: float = 1e-8,
) -> GradcheckReport:
    """Central-difference check of the sequence loss for every parameter group.

    Runs on a 64-bit copy of the parameters. Coordinates are drawn per group
    from a seeded permutation. A coordinate is skipped when the perturbed
    passes take a different piecewise branch (ReLU sign, bilinear cell,
    in-bounds test) than the unperturbed pass, since the function is not
    smooth across that interval; drawing continues until ``coords_per_group``
    smooth coordinates were checked or the group is exhausted.

    The error is |a - n| / max(|a|, |n|, abs_floor), so near-zero gradients
    are judged on absolute error. Rounding noise in the loss difference is
    roughly 1e-16 absolute, giving a derivative error of about 1e-16 / eps;
    within a smooth piece the truncation error is far smaller, hence the
    fairly large default step.

    ``corrupt`` scales the coefficient network's backward pass, a probe that
    the check is sensitive to that path. Groups without parameters are left
    out.
    """
    rng = np.random.default_rng(seed)
    saved = model.state_dict()
    saved_dtype = next(iter(model.params.values())).dtype
    model.astype(np.float64)
    report = GradcheckReport()
    try:
        with T.default_dtype(np.float64):
            frames, gt, valid = collate([sample], np.float64)

            def evaluate_terms() -> tuple[np.ndarray, str]:
                with T.no_grad(), T.record_branches() as branches:
                    preds = model.forward_detailed(frames).predictions
                return sequence_loss_terms(preds, gt, valid), branches.digest()

            model.zero_grad()
            probe = corrupt_backward(corrupt) if corrupt is not None else contextlib.nullcontext()
            with probe:
                with T.record_branches() as branches:
                    preds = model.forward_detailed(frames).predictions
                base_digest = branches.digest()
                sequence_loss(preds, gt, valid).backward()

            for group, names in model.groups().items():
                sizes = [model.params[n].size for n in names]
                total = sum(sizes)
                if total == 0:
                    continue
                bounds = np.cumsum([0] + sizes)
                worst, checked, skipped = 0.0, 0, 0
                for flat_idx in rng.permutation(total):
                    if checked >= coords_per_group:
                        break
                    k = int(np.searchsorted(bounds, flat_idx, side="right") - 1)
                    p = model.params[names[k]]
                    i = int(flat_idx - bounds[k])
                    flat = p.data.reshape(-1)
                    original = flat[i]
                    flat[i] = original + eps
                    plus, d_plus = evaluate_terms()
                    flat[i] = original - eps
                    minus, d_minus = evaluate_terms()
                    flat[i] = original
                    if d_plus != base_digest or d_minus != base_digest:
                        skipped += 1
                        continue
                    numeric = math.fsum((plus - minus).ravel()) / (2 * eps)
                    analytic = float(p.grad.reshape(-1)[i])
                    err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)
                    if err >= worst:
                        worst = err
                        report.worst[group] = (names[k], i, analytic, numeric)
                    checked += 1
                report.errors[group] = worst
                report.checked[group] = checked
                report.skipped[group] = skipped
    finally:
        model.astype(saved_dtype)
        model.load_state_dict(saved)
    return report
