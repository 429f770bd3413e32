"""Shared σ=0 saliency fixture: a network trained to perfect accuracy on noise-free data."""

import numpy as np

from mstl.data import SynthSpec, blob_mask, prototypes, stratified_split, synth_generate
from mstl.model import build_network, default_layers
from mstl.pipeline import StageSpec, train_stage

SPEC = SynthSpec(n=200, difficulty=0.0, blob_intensity=3.0)


def trained_network(seed: int):
    ds = synth_generate(SPEC)
    train, val = stratified_split(ds, 0.1, seed=0)
    net = build_network(default_layers(), seed=seed)
    train_stage(net, train, val, StageSpec("fixture", "sigma0", epochs=20, learning_rate=0.05), seed=seed)
    return net, ds


def class4_image() -> np.ndarray:
    return prototypes(SPEC)[4]


def blob_mask_at(shape: tuple[int, int], cls: int = 4) -> np.ndarray:
    """Input blob mask sampled at the centres of a valid-conv map of the given shape."""
    mask = blob_mask(SPEC, cls)
    off_r, off_c = (SPEC.h - shape[0]) // 2, (SPEC.w - shape[1]) // 2
    return mask[off_r:off_r + shape[0], off_c:off_c + shape[1]]


def on_off_means(cam: np.ndarray, cls: int = 4) -> tuple[float, float]:
    m = blob_mask_at(cam.shape, cls)
    return float(cam[m].mean()), float(cam[~m].mean())
