"""Episodic training loop: one optimizer step per sampled episode.

Fully deterministic in single-worker mode: episode sampling and augmentation
seeds derive from (run seed, iteration), model initialization from the torch
seed, so a resumed run continues bit-identically to an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (
    build_dataset,
    derive_seed,
    episode_tensors,
    make_folds,
    sample_episode,
)
from .errors import DataError, DegenerateMaskError, SamplingError
from .evaluate import evaluate_model
from .losses import LossReport, final_loss, main_loss
from .model import build_model
from .unlabeled import consistency_loss, unlabeled_forward

logger = logging.getLogger(__name__)

_SAMPLE_ATTEMPTS = 32


@dataclass
class TrainResult:
    checkpoint_path: Path
    history: list  # one LossReport dict per iteration
    validation: list  # periodic held-in validation metrics
    config: RunConfig


def poly_lr(base: float, iteration: int, total: int, power: float) -> float:
    return base * (1.0 - iteration / max(total, 1)) ** power


def build_optimizer(cfg: RunConfig, model) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def draw_training_episode(dataset, fold, cfg: RunConfig, iteration: int,
                          attempt: int = 0):
    """Sample + augment, resampling on degenerate masks or exhausted classes."""
    for attempt in range(attempt, _SAMPLE_ATTEMPTS):
        seed = derive_seed(cfg.seed, 1000 + iteration, attempt)
        try:
            episode = sample_episode(
                dataset, fold, "train", cfg.shots, cfg.unlabeled_count, seed,
                class_agnostic_unlabeled=cfg.class_agnostic_unlabeled)
            tensors = episode_tensors(episode, dataset, train=True, seed=seed)
            return episode, tensors, attempt
        except (SamplingError, DegenerateMaskError):
            continue
    raise DataError(f"could not draw a usable episode at iteration {iteration}")


def train_step(model, tensors, cfg: RunConfig, unlabeled_active: bool = True):
    """One episode forward: query loss plus the unlabeled consistency term.

    Returns (loss tensor, LossReport).  The unlabeled branch is skipped
    entirely when it cannot contribute (M = 0, beta = 0, or still inside the
    consistency warm-up), which keeps the computation graph identical to an
    M = 0 run.
    """
    state = model.build_support_state(tensors.support_images, tensors.support_masks)
    query_out = model.segment(tensors.query_image, state)
    main, aux = main_loss(query_out.logits, tensors.query_mask,
                          query_out.aux_logits, cfg.aux_weight)

    beta = cfg.unlabeled_loss_weight
    if unlabeled_active and tensors.unlabeled and beta != 0.0:
        forwards = unlabeled_forward(
            model, state, tensors.unlabeled,
            guide_payload=model.prototype_payload(query_out),
            guide=cfg.unlabeled_guide, soft_labels=cfg.unlabeled_soft_labels,
            confidence=cfg.unlabeled_confidence, training=True)
        unlabeled = consistency_loss(forwards, dtype=main.dtype)
    else:
        unlabeled = torch.zeros((), dtype=main.dtype)

    loss = final_loss(main, unlabeled, beta)
    return loss, LossReport.from_tensors(main, aux, unlabeled, beta)


def train(cfg: RunConfig, dataset=None, log_file=None, resume: str | None = None,
          progress: bool = False) -> TrainResult:
    """Run the full loop and write the final checkpoint into cfg.out_dir."""
    torch.manual_seed(cfg.seed)
    if dataset is None:
        dataset = build_dataset(cfg)
    fold = make_folds(cfg.dataset, cfg.fold)
    # hard fold-hygiene check before any training step
    overlap = fold.train_classes & fold.test_classes
    if overlap:
        raise DataError(f"train/test class overlap in fold {cfg.fold}: {sorted(overlap)}")

    model = build_model(cfg)
    model.train()
    optimizer = build_optimizer(cfg, model)
    start_iteration = 0
    if resume:
        payload = load_checkpoint(resume)
        model.load_state_dict(payload["model"])
        if payload["optimizer"] is not None:
            optimizer.load_state_dict(payload["optimizer"])
        start_iteration = payload["iteration"]

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_file, "a") if log_file else None

    # Polyak tail averaging: running mean of parameters over the schedule's
    # final fraction; smooths the single-episode SGD endpoint
    tail_start = int(cfg.iterations * (1.0 - cfg.tail_average_fraction))
    tail_mean, tail_count = None, 0

    history, validation = [], []
    started = time.time()
    for iteration in range(start_iteration, cfg.iterations):
        if cfg.lr_schedule == "poly":
            lr = poly_lr(cfg.learning_rate, iteration, cfg.iterations, cfg.poly_power)
        else:
            lr = cfg.learning_rate
        for group in optimizer.param_groups:
            group["lr"] = lr

        # pseudo-labels from an untrained model are noise; the consistency
        # term stays off for the first fraction of the schedule
        unlabeled_active = iteration >= cfg.unlabeled_warmup_fraction * cfg.iterations

        # masks can still lose all foreground at feature resolution inside the
        # forward pass; that also means redraw
        attempt = 0
        while True:
            _, tensors, attempt = draw_training_episode(dataset, fold, cfg,
                                                        iteration, attempt)
            try:
                loss, report = train_step(model, tensors, cfg, unlabeled_active)
                break
            except DegenerateMaskError:
                attempt += 1
        optimizer.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                (p for p in model.parameters() if p.requires_grad), cfg.grad_clip)
        optimizer.step()

        if cfg.tail_average_fraction > 0 and iteration >= tail_start:
            with torch.no_grad():
                state_now = model.state_dict()
                if tail_mean is None:
                    tail_mean = {k: v.detach().clone().double()
                                 for k, v in state_now.items()}
                else:
                    for k, v in state_now.items():
                        tail_mean[k] += (v.double() - tail_mean[k]) / (tail_count + 1)
                tail_count += 1

        record = {"iteration": iteration, "lr": lr, **report.to_dict()}
        history.append(record)
        if log_fh:
            log_fh.write(json.dumps(record) + "\n")
        if progress and (iteration + 1) % 50 == 0:
            logger.info("iter %d/%d loss %.4f", iteration + 1, cfg.iterations,
                        report.final)

        if cfg.val_every and (iteration + 1) % cfg.val_every == 0:
            acc = evaluate_model(model, dataset, fold, cfg.shots,
                                 cfg.val_episodes, derive_seed(cfg.seed, 9, iteration),
                                 phase="train")
            entry = {"iteration": iteration, "phase": "val", **acc.to_dict()}
            validation.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")

        if cfg.checkpoint_every and (iteration + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_{iteration + 1:06d}.pt",
                            model, optimizer, iteration + 1, cfg)

    if tail_mean is not None:
        reference = model.state_dict()
        model.load_state_dict({k: v.to(reference[k].dtype)
                               for k, v in tail_mean.items()})
    final_path = save_checkpoint(out_dir / "checkpoint_final.pt",
                                 model, optimizer, cfg.iterations, cfg)
    if log_fh:
        log_fh.close()
    logger.info("training finished in %.1fs, checkpoint at %s",
                time.time() - started, final_path)
    return TrainResult(checkpoint_path=final_path, history=history,
                       validation=validation, config=cfg)
