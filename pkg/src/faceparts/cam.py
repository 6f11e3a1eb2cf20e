"""Class activation maps for the GAP->dense predictor heads.

The map for predictor i and attribute a is the head-weighted sum of the
trunk's pre-GAP feature maps: CAM = sum_j w_{a,j} M_j.  Its spatial mean
equals the pre-sigmoid logit minus the head bias, so hot regions are the
pixels that push the attribute decision.  The global predictor mixes the
full-face features into every segment map and has no single pre-GAP stack,
so it cannot be visualized this way.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AttributeNotPredicted, ShapeMismatch
from .geometry import bilinear_resize
from .model import FULL_IDX, FULL_INPUT, GP_IDX, NUM_PREDICTORS, SEGMENT_INPUT, SplitFaceModel
from .raster import save_image


@dataclass(frozen=True)
class ActivationMap:
    """A predictor/attribute heat map at the pre-GAP spatial resolution."""

    matrix: np.ndarray  # (h, w) float64
    predictor: int
    attribute: int
    vmin: float
    vmax: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("activation map contains non-finite values")
        if self.vmin != float(self.matrix.min()) or \
                self.vmax != float(self.matrix.max()):
            raise ValueError("recorded range disagrees with the matrix")


def compute_cam(model: SplitFaceModel, predictor: int, attribute: int,
                crop: np.ndarray) -> ActivationMap:
    """Head-weighted sum of pre-GAP feature maps for one input crop.

    ``crop`` is a single (3, H, W) unit-range image: 196x196 for the
    full-face predictor, 64x64 for segment predictors.
    """
    if not 0 <= predictor < NUM_PREDICTORS:
        raise ValueError(f"predictor index {predictor} outside 0..15")
    if predictor == GP_IDX:
        raise AttributeNotPredicted(
            "the global predictor has no GAP->dense head to visualize")
    if not 0 <= attribute < model.num_attributes:
        raise AttributeNotPredicted(
            f"attribute {attribute} outside 0..{model.num_attributes - 1}")
    cols = model.masks.indices(predictor)
    pos = np.flatnonzero(cols == attribute)
    if pos.size == 0:
        raise AttributeNotPredicted(
            f"predictor {predictor} does not predict attribute {attribute}")
    side = FULL_INPUT if predictor == FULL_IDX else SEGMENT_INPUT
    if crop.shape != (3, side, side):
        raise ShapeMismatch(
            f"crop shape {crop.shape} != (3, {side}, {side})")

    x = crop[None].astype(model.dtype)
    if predictor == FULL_IDX:
        fmap = model.full_trunk.forward(x, train=False)
        weight = model.full_head_dense.weight
    else:
        fmap = model.seg_trunks[predictor - 1].forward(x, train=False)
        weight = model.seg_heads[predictor - 1].dense.weight
    w = weight[:, pos[0]].astype(np.float64)
    maps = fmap[0].astype(np.float64)  # (C, h, w)
    cam = np.tensordot(w, maps, axes=(0, 0))
    return ActivationMap(matrix=cam, predictor=predictor, attribute=attribute,
                         vmin=float(cam.min()), vmax=float(cam.max()))


def normalized_heat(amap: ActivationMap, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsample then min-max normalize; a constant map becomes 0.5."""
    up = bilinear_resize(amap.matrix, out_h, out_w)
    span = amap.vmax - amap.vmin
    if span <= 0.0:
        return np.full((out_h, out_w), 0.5)
    return np.clip((up - amap.vmin) / span, 0.0, 1.0)


def export_heatmap(amap: ActivationMap, crop: np.ndarray,
                   path) -> tuple[Path, Path]:
    """Write a grayscale heat PGM and a red-channel overlay PPM.

    ``crop`` is the (3, H, W) unit-range input the map was computed from.
    Two files are produced next to each other: ``path`` with a .pgm suffix
    for the normalized heat, and with a .ppm suffix for a 50/50 blend of
    the crop with the heat in the red channel.  Returns both paths.
    """
    if crop.ndim != 3 or crop.shape[0] != 3:
        raise ShapeMismatch(f"crop shape {crop.shape} is not (3, H, W)")
    h, w = crop.shape[1], crop.shape[2]
    heat = normalized_heat(amap, h, w)
    base = Path(path)
    pgm_path = base.with_suffix(".pgm")
    ppm_path = base.with_suffix(".ppm")
    save_image(str(pgm_path), np.round(heat * 255.0).astype(np.uint8))

    rgb = np.moveaxis(np.asarray(crop, dtype=np.float64), 0, 2)
    heat_rgb = np.zeros_like(rgb)
    heat_rgb[:, :, 0] = heat
    overlay = np.clip(0.5 * rgb + 0.5 * heat_rgb, 0.0, 1.0)
    save_image(str(ppm_path), np.round(overlay * 255.0).astype(np.uint8))
    return pgm_path, ppm_path
