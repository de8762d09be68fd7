"""Heatmaps of branch activations and erasing masks, written as PPM files."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import resize_nearest, write_image
from .erasing import min_max_norm
from .tensor import no_grad

# value 0 -> blue, 0.25 -> cyan, 0.5 -> green, 0.75 -> yellow, 1 -> red
RAMP_STOPS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
RAMP_COLORS = np.array([
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
])


def color_ramp(values: np.ndarray) -> np.ndarray:
    """Map an (H, W) array in [0, 1] to a (3, H, W) RGB image."""
    v = np.clip(values, 0.0, 1.0)
    return np.stack([np.interp(v, RAMP_STOPS, RAMP_COLORS[:, c]) for c in range(3)])


def heatmap(fmap: np.ndarray, h: int, w: int) -> np.ndarray:
    """Channel mean of a (C, h', w') map, min-max normalised, upsampled, coloured."""
    saliency = min_max_norm(fmap.mean(axis=0)[None, None])[0]
    return color_ramp(resize_nearest(saliency, h, w)[0])


def visualize_masks(model, image: np.ndarray, out_dir) -> list[Path]:
    """Write ``heatmap_<branch>.ppm`` per branch plus ``mask_<e_k>.ppm`` and
    ``saliency_<e_k>.ppm`` per IE branch; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            outputs = model(image[None])
    finally:
        model.train(was_training)
    paths = []
    for name in outputs.names():
        path = out / f"heatmap_{name}.ppm"
        write_image(heatmap(outputs.maps[name].data[0], h, w), path)
        paths.append(path)
    for name, erased in outputs.erasures.items():
        mask = resize_nearest(erased.mask.values[0], h, w)
        path = out / f"mask_{name}.ppm"
        write_image(np.repeat(mask, 3, axis=0), path)
        paths.append(path)
        path = out / f"saliency_{name}.ppm"
        write_image(color_ramp(resize_nearest(erased.saliency[0], h, w)[0]), path)
        paths.append(path)
    return paths
