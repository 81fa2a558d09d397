"""Training orchestration: catalog construction, the batch loop driving the
momentum optimizer, periodic validation, and checkpointing.

All randomness derives from the run seed through fixed per-purpose offsets,
so a rerun with the same seed reproduces every file byte for byte.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import dataset, network, optimizer
from .config import (RunConfig, foveation_from_config, grid_from_config,
                     network_from_config, optimizer_from_config)
from .errors import NumericError
from .tensor import seeded_rng
from .windowing import extract_window

# sub-stream offsets off the master seed; one owner per stream
SEED_INIT = 1
SEED_CATALOG = 2
SEED_SAMPLER = 3
SEED_SPLIT = 4
SEED_DROPOUT = 5


@dataclass
class TrainResult:
    spec: network.NetworkSpec
    state: network.NetworkState
    checkpoint_path: str
    log_path: str
    val_log_path: str | None
    final_loss: float
    batches_run: int


def stack_windows(windows) -> tuple[np.ndarray, np.ndarray]:
    pixels = np.stack([w.pixels for w in windows])
    labels = np.array([w.label for w in windows], dtype=np.int64)
    return pixels, labels


def train_on_windows(spec: network.NetworkSpec, state: network.NetworkState,
                     pixels: np.ndarray, labels: np.ndarray,
                     opt_cfg: optimizer.OptimizerConfig, n_batches: int,
                     rng: np.random.Generator) -> list[float]:
    """Fit the state to a fixed window set by full-batch steps; returns the
    per-batch loss history. Used for overfit checks and small experiments."""
    opt_state = optimizer.OptimizerState()
    losses = []
    params = state.param_arrays()
    flags = state.maxnorm_flags()
    for _ in range(n_batches):
        _, trace = network.forward_batch(state, spec, pixels, "train", rng)
        loss, grads = network.loss_and_backward_batch(state, spec, trace, labels)
        if not math.isfinite(loss):
            raise NumericError("training loss became non-finite")
        optimizer.step(opt_state, params, grads, opt_cfg, flags)
        losses.append(loss)
    return losses


def _val_windows(images, side: int, limit: int, rng: np.random.Generator):
    """Plain (unaugmented) windows from held-out images, both classes."""
    cat = dataset.build_catalog(images, dataset.CatalogConfig(seed=0))
    n_ma = min(cat.ma_centers.shape[0], limit // 2)
    n_non = min(cat.non_ma_centers.shape[0], limit - n_ma)
    rows_ma = cat.ma_centers[rng.choice(cat.ma_centers.shape[0], n_ma,
                                        replace=False)]
    rows_non = cat.non_ma_centers[rng.choice(cat.non_ma_centers.shape[0], n_non,
                                             replace=False)]
    wins = []
    labels = []
    for rows, label in ((rows_ma, 1), (rows_non, 0)):
        for row in rows:
            img = images[int(row[0])]
            wins.append(extract_window(img.rgb, int(row[1]), int(row[2]),
                                       side).pixels)
            labels.append(label)
    return np.stack(wins), np.array(labels, dtype=np.int64)


def train_detector(cfg: RunConfig, images: list, out_dir) -> TrainResult:
    """Full training run per the configuration; writes the checkpoint, the
    CSV training log (batch,t,loss,lr,momentum) and, when a validation split
    exists, a val log (batch,se,sp)."""
    os.makedirs(out_dir, exist_ok=True)
    seed = cfg["seed"]
    spec = network_from_config(cfg)
    state = network.init_state(spec, seeded_rng(seed + SEED_INIT))
    opt_cfg = optimizer_from_config(cfg)
    opt_state = optimizer.OptimizerState()

    train_idx, val_idx = dataset.split_by_image(
        len(images), cfg["dataset.val_fraction"], seeded_rng(seed + SEED_SPLIT))
    train_images = [images[i] for i in train_idx]
    val_images = [images[i] for i in val_idx]

    catalog = dataset.build_catalog(
        train_images, dataset.CatalogConfig(cfg["dataset.nonma_per_ma"],
                                            cfg["dataset.hard_negative_fraction"],
                                            seed + SEED_CATALOG))
    side = cfg["network.input_side"]
    sampler = dataset.batch_sampler(
        catalog, opt_cfg.batch_size, cfg["dataset.ma_fraction"],
        seeded_rng(seed + SEED_SAMPLER), side,
        foveation_from_config(cfg), grid_from_config(cfg),
        cfg["dataset.augment"], cfg["dataset.rotation_max_degrees"])
    drop_rng = seeded_rng(seed + SEED_DROPOUT)

    val_set = None
    if val_images:
        val_set = _val_windows(val_images, side, cfg["train.val_windows"],
                               seeded_rng(seed + SEED_SPLIT + 100))

    ckpt_path = os.path.join(out_dir, "checkpoint.madnn")
    log_path = os.path.join(out_dir, "train_log.csv")
    val_log_path = os.path.join(out_dir, "val_log.csv") if val_set else None

    params = state.param_arrays()
    flags = state.maxnorm_flags()
    n_batches = cfg["train.batches"]
    interval = cfg["train.eval_interval"]
    loss = float("nan")
    log = open(log_path, "w", encoding="utf-8", newline="\n")
    vlog = open(val_log_path, "w", encoding="utf-8", newline="\n") \
        if val_log_path else None
    try:
        log.write("batch,t,loss,lr,momentum\n")
        if vlog:
            vlog.write("batch,se,sp\n")
        done = 0
        for t in range(n_batches):
            pixels, labels = stack_windows(next(sampler))
            _, trace = network.forward_batch(state, spec, pixels, "train",
                                             drop_rng)
            loss, grads = network.loss_and_backward_batch(state, spec, trace,
                                                          labels)
            lr, mom = optimizer.schedule(opt_cfg, opt_state.t)
            if not math.isfinite(loss):
                raise NumericError(
                    f"loss became non-finite at batch {t + 1}; last good "
                    f"checkpoint retained at {ckpt_path}")
            optimizer.step(opt_state, params, grads, opt_cfg, flags)
            log.write(f"{t + 1},{t},{loss!r},{lr!r},{mom!r}\n")
            done = t + 1
            if done % interval == 0 or done == n_batches:
                network.save_checkpoint(ckpt_path, spec, state)
                if vlog and val_set is not None:
                    p = network.predict_proba_batch(state, spec, val_set[0])
                    pred = p >= 0.5
                    actual = val_set[1] == 1
                    tp = int((pred & actual).sum())
                    fn = int((~pred & actual).sum())
                    tn = int((~pred & ~actual).sum())
                    fp = int((pred & ~actual).sum())
                    se = tp / (tp + fn) if tp + fn else float("nan")
                    sp = tn / (tn + fp) if tn + fp else float("nan")
                    vlog.write(f"{done},{se!r},{sp!r}\n")
    finally:
        log.close()
        if vlog:
            vlog.close()
    return TrainResult(spec, state, ckpt_path, log_path, val_log_path,
                       float(loss), done)
