"""Training loop and evaluation helpers used by the command line."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Triplet, batch_iter, load_triplet_dir, synth_dataset, to_tensor
from .losses import loss_terms, make_surrogate_extractor
from .metrics import interpolation_error, psnr, quantize, ssim
from .model import TsainParams, count_parameters, init_params, tsain_forward
from .numerics import adam_step, no_grad

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "total", "pixel", "perc", "style", "val_psnr", "val_ssim", "val_ie")


def load_dataset(cfg: RunConfig) -> list[Triplet]:
    d = cfg.data
    if d.synthetic:
        return synth_dataset(d.synthetic, d.synthetic_size, seed=cfg.train.seed,
                             max_motion=d.synthetic_motion)
    return load_triplet_dir(d.root)


def split_dataset(triplets: Sequence[Triplet], val_fraction: float, seed: int
                  ) -> tuple[list[Triplet], list[Triplet]]:
    order = np.random.default_rng(seed).permutation(len(triplets))
    n_val = int(math.floor(val_fraction * len(triplets)))
    val = [triplets[i] for i in sorted(order[:n_val])]
    train = [triplets[i] for i in sorted(order[n_val:])]
    return train, val


def predict(params: TsainParams, i0: np.ndarray, i2: np.ndarray) -> np.ndarray:
    """Quantised middle frame for two uint8 frames."""
    with no_grad():
        out = tsain_forward(to_tensor([i0]), to_tensor([i2]), params)
    return quantize(out)


@dataclass
class EvalRow:
    id: str
    psnr: float
    ssim: float
    ie: float


def evaluate(params: TsainParams | None, triplets: Sequence[Triplet],
             copy_first: bool = False) -> tuple[list[EvalRow], float]:
    """Per-sample metrics and mean per-frame runtime in seconds.

    With ``copy_first`` the prediction is frame 0 itself (a no-model baseline).
    """
    rows = []
    elapsed = 0.0
    for t in triplets:
        start = time.perf_counter()
        pred = t.frames[0].copy() if copy_first else predict(params, t.frames[0], t.frames[2])
        elapsed += time.perf_counter() - start
        gt = t.frames[1]
        rows.append(EvalRow(t.id, psnr(pred, gt), ssim(pred, gt), interpolation_error(pred, gt)))
    runtime = elapsed / len(triplets) if triplets else 0.0
    return rows, runtime


def summarize(rows: Sequence[EvalRow]) -> tuple[float, float, float]:
    if not rows:
        return math.nan, math.nan, math.nan
    return (float(np.mean([r.psnr for r in rows])), float(np.mean([r.ssim for r in rows])),
            float(np.mean([r.ie for r in rows])))


def format_log_line(values: dict) -> str:
    parts = []
    for key in LOG_FIELDS:
        v = values[key]
        parts.append(f"{key}={v}" if isinstance(v, int) else f"{key}={v:.10g}")
    return " ".join(parts)


def parse_log_line(line: str) -> dict:
    out = {}
    for item in line.split():
        key, _, raw = item.partition("=")
        out[key] = int(raw) if key == "epoch" else float(raw)
    return out


def train(cfg: RunConfig, resume=None) -> TsainParams:
    """Run the configured schedule, writing a checkpoint and a log line per epoch."""
    tc = cfg.train
    triplets = load_dataset(cfg)
    if not triplets:
        raise ValueError("dataset is empty")
    train_set, val_set = split_dataset(triplets, cfg.data.val_fraction, tc.seed)
    if resume is not None:
        params = load_checkpoint(resume, cfg.model)
    else:
        params = init_params(cfg.model, seed=tc.seed)
    fx = None
    if cfg.loss.perc or cfg.loss.style:
        fx = make_surrogate_extractor(seed=0, image_channels=cfg.model.image_channels)
    ckpt = Path(cfg.io.checkpoint)
    log_path = Path(cfg.io.log)
    log.info("training %d samples (%d validation), %d parameters",
             len(train_set), len(val_set), count_parameters(params))
    for epoch in range(params.epoch + 1, tc.epochs + 1):
        lr = tc.lr_at(epoch)
        sums = {"total": 0.0, "pixel": 0.0, "perc": 0.0, "style": 0.0}
        batches = 0
        for (i0, i2), i1 in batch_iter(train_set, tc.batch, tc.patch, tc.seed, epoch):
            pred = tsain_forward(i0, i2, params)
            terms = loss_terms(pred, i1, fx, cfg.loss)
            terms["total"].backward()
            adam_step(params.store, lr)
            for key in sums:
                if terms[key] is not None:
                    sums[key] += terms[key].item()
            batches += 1
        params.epoch = epoch
        rows, _ = evaluate(params, val_set)
        vp, vs, vi = summarize(rows)
        line = format_log_line({"epoch": epoch, "lr": lr,
                                **{k: v / max(batches, 1) for k, v in sums.items()},
                                "val_psnr": vp, "val_ssim": vs, "val_ie": vi})
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
        log.info(line)
        save_checkpoint(params, ckpt, epoch=epoch, include_optimizer=True)
    save_checkpoint(params, ckpt, epoch=params.epoch, include_optimizer=True)
    return params
