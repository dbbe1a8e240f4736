"""Debug rendering for episode-dump: mask overlays, prior heatmaps, and
prototype grid assignments as PNG files."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import derive_seed, episode_tensors, sample_episode
from .model import foreground_probability, logits_to_mask, upsample_logits

_GRID_PALETTE_SEED = 12345


def to_uint8(image: np.ndarray) -> np.ndarray:
    return (np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def save_png(arr: np.ndarray, path: Path):
    Image.fromarray(arr).save(path)


def overlay_mask(image: np.ndarray, mask: np.ndarray,
                 color=(1.0, 0.1, 0.1), alpha: float = 0.45) -> np.ndarray:
    out = np.asarray(image, dtype=np.float32).copy()
    m = np.asarray(mask).astype(bool)
    out[m] = (1 - alpha) * out[m] + alpha * np.asarray(color, dtype=np.float32)
    return out


def heatmap(map01: np.ndarray) -> np.ndarray:
    """[0,1] map -> blue-to-red ramp."""
    v = np.clip(np.asarray(map01, dtype=np.float32), 0, 1)
    return np.stack([v, 0.2 * np.ones_like(v), 1.0 - v], axis=-1)


def grid_assignment_image(m: int, hw: tuple[int, int]) -> np.ndarray:
    """Distinct color per grid cell, tiled over the plane."""
    rng = np.random.default_rng(_GRID_PALETTE_SEED)
    palette = rng.uniform(0.2, 1.0, size=(m * m, 3)).astype(np.float32)
    h, w = hw
    ys = (np.arange(h) * m // h)[:, None]
    xs = (np.arange(w) * m // w)[None, :]
    return palette[(ys * m + xs).reshape(-1)].reshape(h, w, 3)


def denormalize(tensor: torch.Tensor, dataset) -> np.ndarray:
    img = tensor.detach().permute(1, 2, 0).cpu().numpy()
    return img * dataset.std + dataset.mean


def dump_episode(model, dataset, fold, cfg, out_dir: str | Path,
                 seed: int | None = None) -> Path:
    """Render one training episode: inputs, priors, grid, and prediction."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if seed is None else seed
    ep_seed = derive_seed(seed, 777)
    episode = sample_episode(dataset, fold, "train", cfg.shots,
                             cfg.unlabeled_count, ep_seed,
                             class_agnostic_unlabeled=cfg.class_agnostic_unlabeled)
    tensors = episode_tensors(episode, dataset, train=True, seed=ep_seed)

    for i, (img, mask) in enumerate(zip(tensors.support_images, tensors.support_masks)):
        view = overlay_mask(denormalize(img, dataset), mask.numpy())
        save_png(to_uint8(view), out / f"support_{i}.png")
    q_img = denormalize(tensors.query_image, dataset)
    save_png(to_uint8(overlay_mask(q_img, tensors.query_mask.numpy(),
                                   color=(0.1, 1.0, 0.1))), out / "query_truth.png")
    for j, views in enumerate(tensors.unlabeled):
        save_png(to_uint8(denormalize(views.weak_image, dataset)),
                 out / f"unlabeled_{j}_weak.png")
        save_png(to_uint8(denormalize(views.strong_image, dataset)),
                 out / f"unlabeled_{j}_strong.png")

    with torch.no_grad():
        state = model.build_support_state(tensors.support_images, tensors.support_masks)
        result = model.segment(tensors.query_image, state)
        hw = tensors.query_image.shape[-2:]
        for prior, name in ((result.interaction_prior, "prior_interaction"),
                            (result.guidance_prior, "prior_guidance")):
            up = prior.resized(hw).cpu().numpy()
            save_png(to_uint8(heatmap(up)), out / f"{name}.png")
        if result.local_prototypes is not None:
            save_png(to_uint8(grid_assignment_image(result.local_prototypes.m, hw)),
                     out / "prototype_grid.png")
        logits = upsample_logits(result.logits, hw)
        pred = logits_to_mask(logits).cpu().numpy()
        save_png(to_uint8(overlay_mask(q_img, pred)), out / "query_prediction.png")
        prob = foreground_probability(logits).cpu().numpy()
        save_png(to_uint8(heatmap(prob)), out / "query_probability.png")
    return out
