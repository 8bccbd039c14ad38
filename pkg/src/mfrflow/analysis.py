"""Dataset directories, NZR profiling and paired recovery ablations."""

from __future__ import annotations

import csv
import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .costvolume import CostVolumePyramid
from .flowfield import FlowField
from .flowio import FormatError, read_flo, read_pgm, read_ppm, write_flo, write_pgm, write_ppm
from .lookup import LookupConfig, lookup_motion_feature, nzr
from .mfr import MfrConfig, patch_support, recovered_validity
from .model import DOWNSAMPLE, MFRFlowModel, ModelConfig
from .synth import SampleSequence
from .train import TrainConfig, collate, evaluate, train_loop

MANIFEST = "manifest.csv"


# ------------------------------------------------------------ dataset on disk
def save_dataset(samples: list[SampleSequence], out_dir) -> None:
    """One directory per sample (PPM frames, .flo flows, PGM masks) plus a manifest.

    Frames are stored as 8-bit PPM, so a reloaded dataset carries quantised
    images; flows and masks round-trip exactly.
    """
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, MANIFEST), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "regime", "history", "directory"])
        for idx, s in enumerate(samples):
            sid = s.sample_id or f"{idx:05d}"
            sub = f"sample_{sid}"
            path = os.path.join(out_dir, sub)
            os.makedirs(path, exist_ok=True)
            for k, frame in enumerate(s.frames):
                write_ppm(os.path.join(path, f"frame_{k}.ppm"), frame)
            write_flo(os.path.join(path, "flow.flo"), s.gt_flow)
            for n, hf in enumerate(s.history_flows, start=1):
                write_flo(os.path.join(path, f"history_{n}.flo"), hf)
            write_pgm(os.path.join(path, "occlusion.pgm"), s.occlusion_mask)
            write_pgm(os.path.join(path, "valid.pgm"), s.valid_mask)
            write_pgm(os.path.join(path, "sprite.pgm"), s.sprite_mask)
            writer.writerow([sid, s.regime, s.history, sub])


def load_dataset(data_dir) -> list[SampleSequence]:
    manifest = os.path.join(data_dir, MANIFEST)
    if not os.path.isfile(manifest):
        raise FormatError(f"{data_dir}: no {MANIFEST}")
    out = []
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        try:
            path = os.path.join(data_dir, row["directory"])
            history = int(row["history"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{manifest}: malformed row {row}") from exc
        frames = [read_ppm(os.path.join(path, f"frame_{k}.ppm")) for k in range(history + 2)]
        hist = []
        for n in range(1, history + 1):
            hf = read_flo(os.path.join(path, f"history_{n}.flo"))
            hist.append(FlowField(hf.numpy(), f"t->t-{n}"))
        out.append(
            SampleSequence(
                frames=frames,
                gt_flow=read_flo(os.path.join(path, "flow.flo")),
                occlusion_mask=read_pgm(os.path.join(path, "occlusion.pgm")) > 127,
                valid_mask=read_pgm(os.path.join(path, "valid.pgm")) > 127,
                sprite_mask=read_pgm(os.path.join(path, "sprite.pgm")) > 127,
                history_flows=hist,
                regime=row["regime"],
                sample_id=row["sample_id"],
            )
        )
    return out


# --------------------------------------------------------------- NZR profile
def downsample_flow(flow: np.ndarray, factor: int = DOWNSAMPLE) -> np.ndarray:
    """Block-average a [2, H, W] image-pixel flow onto the 1/factor grid, in grid pixels."""
    _, H, W = flow.shape
    if H % factor or W % factor:
        raise T.ShapeError(f"flow {H}x{W} not divisible by {factor}")
    blocks = flow.reshape(2, H // factor, factor, W // factor, factor).mean(axis=(2, 4))
    return blocks / factor


def downsample_mask(mask: np.ndarray, factor: int = DOWNSAMPLE) -> np.ndarray:
    """Majority vote per factor x factor block."""
    H, W = mask.shape
    return mask.reshape(H // factor, factor, W // factor, factor).mean(axis=(1, 3)) >= 0.5


def _geometry_pyramid(h: int, w: int, levels: int) -> CostVolumePyramid:
    # In-bounds tests only depend on the target extent, so an all-zero volume suffices.
    return CostVolumePyramid([T.Tensor(np.zeros((h, w, h >> l, w >> l))) for l in range(levels)])


def lookup_validity(flow: np.ndarray, cfg: LookupConfig = LookupConfig()) -> np.ndarray:
    """Geometric validity mask of a lookup at ``flow`` ([2, h, w], grid pixels)."""
    _, h, w = flow.shape
    _, mask = lookup_motion_feature(_geometry_pyramid(h, w, cfg.levels), flow, cfg)
    return mask.valid


@dataclass
class NzrProfile:
    sample_id: str
    regime: str
    baseline: list[float]  # per level
    recovered: list[float]
    sprite_invalid_zero: float  # invalid fraction on sprite pixels with zero flow
    sprite_invalid_gt: float  # same with the true flow


def analytic_profile(sample: SampleSequence, cfg: LookupConfig = LookupConfig(), mfr: MfrConfig | None = None) -> NzrProfile:
    """NZR with and without recovery when every flow is the true one.

    Coefficients are taken as strictly positive everywhere, as any softmax
    output is, so an entry is recovered when some history lookup at some
    patch offset is in bounds.
    """
    mfr = mfr or MfrConfig(history_frames=sample.history)
    fwd = downsample_flow(sample.gt_flow.numpy())
    valid = lookup_validity(fwd, cfg)
    hist_valid = [lookup_validity(downsample_flow(h.numpy()), cfg) for h in sample.history_flows]
    h, w = fwd.shape[1:]
    alpha = np.ones((sample.history, mfr.window, h, w))
    # Offsets that fall off the grid carry no weight.
    alpha = alpha * patch_support(mfr.window, h, w)[None]
    rec = recovered_validity(valid, hist_valid, alpha, mfr)

    sprite = downsample_mask(sample.sprite_mask)
    zero_valid = lookup_validity(np.zeros_like(fwd), cfg)
    if sprite.any():
        inv_zero = float((~zero_valid[:, sprite]).mean())
        inv_gt = float((~valid[:, sprite]).mean())
    else:
        inv_zero = inv_gt = float("nan")
    return NzrProfile(
        sample.sample_id,
        sample.regime,
        nzr(valid, per_level=True, levels=cfg.levels),
        nzr(rec, per_level=True, levels=cfg.levels),
        inv_zero,
        inv_gt,
    )


def model_profile(model: MFRFlowModel, samples: list[SampleSequence], batch_size: int = 8) -> list[NzrProfile]:
    """NZR of the model's final lookup, before and after recovery."""
    rep = evaluate(model, samples, batch_size)
    cfg = model.cfg.lookup
    out = []
    for s, row in zip(samples, rep.rows):
        base = [row.get(f"nzr_baseline_l{l + 1}", float("nan")) for l in range(cfg.levels)]
        rec = [row.get(f"nzr_recovered_l{l + 1}", float("nan")) for l in range(cfg.levels)]
        sprite = downsample_mask(s.sprite_mask)
        fwd = downsample_flow(s.gt_flow.numpy())
        if sprite.any():
            inv_zero = float((~lookup_validity(np.zeros_like(fwd), cfg)[:, sprite]).mean())
            inv_gt = float((~lookup_validity(fwd, cfg)[:, sprite]).mean())
        else:
            inv_zero = inv_gt = float("nan")
        out.append(NzrProfile(s.sample_id, s.regime, base, rec, inv_zero, inv_gt))
    return out


def write_profile_csv(profiles: list[NzrProfile], path) -> None:
    """Long format: one row per (sample, level)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "regime", "level", "nzr_baseline", "nzr_recovered"])
        for p in profiles:
            for l, (b, r) in enumerate(zip(p.baseline, p.recovered), start=1):
                w.writerow([p.sample_id, p.regime, l, repr(float(b)), repr(float(r))])


def write_severity_csv(profiles: list[NzrProfile], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "regime", "sprite_invalid_zero_flow", "sprite_invalid_gt_flow"])
        for p in profiles:
            w.writerow([p.sample_id, p.regime, repr(p.sprite_invalid_zero), repr(p.sprite_invalid_gt)])


def mean_profile(profiles: list[NzrProfile]) -> tuple[np.ndarray, np.ndarray]:
    base = np.array([p.baseline for p in profiles], dtype=np.float64)
    rec = np.array([p.recovered for p in profiles], dtype=np.float64)
    return base.mean(axis=0), rec.mean(axis=0)


# ------------------------------------------------------------------- ablation
@dataclass
class AblationRow:
    seed: int
    epe_on: float
    epe_off: float

    @property
    def recovery_wins(self) -> bool:
        return self.epe_on < self.epe_off


def ablate(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_set: list[SampleSequence],
    val_set: list[SampleSequence],
    seeds: list[int],
    out_dir=None,
) -> list[AblationRow]:
    """Train with recovery on and off from the same seed and data; compare held-out EPE."""
    rows = []
    for seed in seeds:
        epes = {}
        for on in (True, False):
            cfg = dataclasses.replace(model_cfg, recovery=on)
            model = MFRFlowModel(cfg, seed=seed)
            run_dir = None
            if out_dir is not None:
                run_dir = os.path.join(out_dir, f"seed{seed}_{'on' if on else 'off'}")
                os.makedirs(run_dir, exist_ok=True)
            train_loop(dataclasses.replace(train_cfg, seed=seed, eval_every=0), model, train_set, None, run_dir)
            epes[on] = evaluate(model, val_set).mean_epe
        rows.append(AblationRow(seed, epes[True], epes[False]))
    if out_dir is not None:
        write_ablation_csv(rows, os.path.join(out_dir, "ablation.csv"))
    return rows


def write_ablation_csv(rows: list[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "epe_recovery_on", "epe_recovery_off", "recovery_wins"])
        for r in rows:
            w.writerow([r.seed, repr(r.epe_on), repr(r.epe_off), int(r.recovery_wins)])


def predict(model: MFRFlowModel, sample: SampleSequence) -> np.ndarray:
    """Final full-resolution prediction for one sample, [2, H, W]."""
    with T.no_grad():
        frames, _, _ = collate([sample])
        return model.forward_detailed(frames).predictions[-1].data[0]
