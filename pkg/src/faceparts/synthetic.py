"""Procedural face-like rasters with region-localized binary attributes.

The generator exists so the whole pipeline (training, ranking, fusion,
occlusion handling) can be exercised without downloading a real face
dataset.  Each image is a stylized face drawn from a canonical fiducial
layout with small per-image jitter; six binary attributes each control a
high-contrast marking confined to a known facial region, so segments that
cover the region can learn the attribute and segments that cannot see it
stay near chance.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import raster
from .geometry import BoundingBox, FiducialSet

IMAGE_SIZE = 201

# Canonical 21-point layout for a 201x201 raster, 1-based index k at
# CANONICAL_POINTS[k-1].  Symmetric about x = 100: 1..6 brows, 7..12 eyes,
# 13 bridge, 14..16 nose, 17 philtrum, 18..20 mouth, 21 chin.
CANONICAL_POINTS: tuple[tuple[float, float], ...] = (
    (55.0, 60.0), (75.0, 58.0), (95.0, 60.0), (105.0, 60.0), (125.0, 58.0), (145.0, 60.0),
    (55.0, 75.0), (75.0, 74.0), (95.0, 75.0), (105.0, 75.0), (125.0, 74.0), (145.0, 75.0),
    (100.0, 95.0),
    (85.0, 110.0), (100.0, 115.0), (115.0, 110.0),
    (100.0, 125.0),
    (80.0, 140.0), (100.0, 142.0), (120.0, 140.0),
    (100.0, 170.0),
)

CANONICAL_FACE_BOX = BoundingBox(40.0, 30.0, 160.0, 190.0)

ATTRIBUTE_NAMES: tuple[str, ...] = (
    "patch_brow_left",
    "patch_brow_right",
    "band_forehead",
    "patch_chin",
    "patch_cheek_left",
    "mark_nose",
)

#: Nominal marking rectangle (x0, y0, x1, y1) per attribute, canonical frame.
ATTRIBUTE_REGIONS: tuple[tuple[float, float, float, float], ...] = (
    (55.0, 45.0, 75.0, 56.0),
    (125.0, 45.0, 145.0, 56.0),
    (62.0, 34.0, 138.0, 42.0),
    (88.0, 155.0, 112.0, 170.0),
    (52.0, 120.0, 70.0, 138.0),
    (92.0, 97.0, 108.0, 109.0),
)

#: Positive rate used when sampling each attribute independently.
ATTRIBUTE_RATES: tuple[float, ...] = (0.5, 0.45, 0.4, 0.5, 0.35, 0.45)

#: Attributes whose marking lies inside the upper-half (U12) region.
UPPER_HALF_ATTRIBUTES: tuple[int, ...] = (0, 1, 2, 5)


def canonical_fiducials(size: int = IMAGE_SIZE) -> FiducialSet:
    """The jitter-free layout, scaled to a size x size raster."""
    s = size / IMAGE_SIZE
    return FiducialSet(
        points=tuple((x * s, y * s) for x, y in CANONICAL_POINTS),
        visibility=(1.0,) * 21,
        face_box=BoundingBox(
            CANONICAL_FACE_BOX.x_min * s,
            CANONICAL_FACE_BOX.y_min * s,
            CANONICAL_FACE_BOX.x_max * s,
            CANONICAL_FACE_BOX.y_max * s,
        ),
        image_width=size,
        image_height=size,
    )


@dataclass
class SyntheticSample:
    image: np.ndarray
    fiducials: FiducialSet
    labels: np.ndarray


def _fill_ellipse(img: np.ndarray, cx: float, cy: float, rx: float, ry: float, color) -> None:
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    img[mask] = color


def _fill_rect(img: np.ndarray, x0: float, y0: float, x1: float, y1: float, color) -> None:
    h, w = img.shape[:2]
    xa = max(int(round(x0)), 0)
    ya = max(int(round(y0)), 0)
    xb = min(int(round(x1)), w - 1)
    yb = min(int(round(y1)), h - 1)
    if xa <= xb and ya <= yb:
        img[ya : yb + 1, xa : xb + 1] = color


def generate_sample(
    rng: np.random.Generator, labels: np.ndarray, size: int = IMAGE_SIZE
) -> SyntheticSample:
    """Draw one face with the markings selected by ``labels``."""
    s = size / IMAGE_SIZE
    dx = rng.uniform(-6.0, 6.0) * s
    dy = rng.uniform(-6.0, 6.0) * s

    bg = rng.integers(150, 180)
    noise = rng.integers(-8, 9, size=(size, size, 3), dtype=np.int16)
    img = np.clip(bg + noise, 0, 255).astype(np.uint8)

    skin = (200 + rng.integers(-15, 16), 170 + rng.integers(-15, 16), 140 + rng.integers(-15, 16))
    _fill_ellipse(img, 100 * s + dx, 112 * s + dy, 62 * s, 85 * s, skin)

    jit = rng.uniform(-1.5, 1.5, size=(21, 2)) * s
    points = tuple(
        (x * s + dx + jit[k, 0], y * s + dy + jit[k, 1])
        for k, (x, y) in enumerate(CANONICAL_POINTS)
    )

    # Facial features anchored to the jittered layout.
    for brow in ((points[0], points[2]), (points[3], points[5])):
        (xa, ya), (xb, yb) = brow
        _fill_rect(img, xa, min(ya, yb) - 2 * s, xb, max(ya, yb) + 1 * s, (70, 50, 40))
    for eye_k in (7, 10):  # 0-based: points 8 and 11, the eye centers
        ex, ey = points[eye_k]
        _fill_ellipse(img, ex, ey, 9 * s, 5 * s, (250, 250, 250))
        _fill_ellipse(img, ex, ey, 3.5 * s, 3.5 * s, (45, 35, 30))
    nx, ny = points[14]
    _fill_rect(img, nx - 2 * s, points[12][1], nx + 2 * s, ny, (160, 120, 100))
    (mx0, my0), (mx1, my1) = points[17], points[19]
    _fill_rect(img, mx0, min(my0, my1) - 2 * s, mx1, max(my0, my1) + 2 * s, (150, 60, 60))

    for j, present in enumerate(labels):
        if not present:
            continue
        x0, y0, x1, y1 = ATTRIBUTE_REGIONS[j]
        px = rng.uniform(-2.0, 2.0) * s
        py = rng.uniform(-2.0, 2.0) * s
        if j == 2:
            color = (45 + rng.integers(0, 15),) * 3  # dark forehead band
        else:
            color = (245 - rng.integers(0, 10), 235 - rng.integers(0, 10), 40 + rng.integers(0, 20))
        _fill_rect(img, x0 * s + dx + px, y0 * s + dy + py, x1 * s + dx + px, y1 * s + dy + py, color)

    face_box = BoundingBox(
        CANONICAL_FACE_BOX.x_min * s + dx,
        CANONICAL_FACE_BOX.y_min * s + dy,
        CANONICAL_FACE_BOX.x_max * s + dx,
        CANONICAL_FACE_BOX.y_max * s + dy,
    ).clamped(size, size)
    fids = FiducialSet(
        points=points,
        visibility=(1.0,) * 21,
        face_box=face_box,
        image_width=size,
        image_height=size,
    )
    return SyntheticSample(image=img, fiducials=fids, labels=labels.copy())


def generate_dataset(
    out_dir: str,
    n_train: int,
    n_val: int,
    n_test: int,
    seed: int = 0,
    size: int = IMAGE_SIZE,
) -> None:
    """Write a complete dataset directory: images, labels, splits, landmarks.

    Layout matches the ingestion contracts used everywhere else:
    images/NNNNNN.ppm, attributes.txt (count line, name line, +-1 rows),
    split.txt (name 0|1|2), landmarks.csv.
    """
    rng = np.random.default_rng(seed)
    n_total = n_train + n_val + n_test
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)

    label_matrix = (
        rng.random((n_total, len(ATTRIBUTE_NAMES))) < np.asarray(ATTRIBUTE_RATES)
    ).astype(np.int64)

    attr_lines = [str(n_total), " ".join(ATTRIBUTE_NAMES)]
    split_lines = []
    lm_lines = ["image_name," + ",".join(
        f"x{k},y{k},v{k}" for k in range(1, 22)
    ) + ",xtl,ytl,xbr,ybr"]

    for idx in range(n_total):
        name = f"{idx + 1:06d}.ppm"
        sample = generate_sample(rng, label_matrix[idx], size=size)
        raster.save_image(os.path.join(out_dir, "images", name), sample.image)

        attr_lines.append(
            name + " " + " ".join("1" if v else "-1" for v in sample.labels)
        )
        split = 0 if idx < n_train else (1 if idx < n_train + n_val else 2)
        split_lines.append(f"{name} {split}")

        f = sample.fiducials
        fields = [name]
        for (x, y), v in zip(f.points, f.visibility):
            fields += [f"{x:.3f}", f"{y:.3f}", f"{v:.3f}"]
        fields += [
            f"{f.face_box.x_min:.3f}", f"{f.face_box.y_min:.3f}",
            f"{f.face_box.x_max:.3f}", f"{f.face_box.y_max:.3f}",
        ]
        lm_lines.append(",".join(fields))

    with open(os.path.join(out_dir, "attributes.txt"), "w") as fh:
        fh.write("\n".join(attr_lines) + "\n")
    with open(os.path.join(out_dir, "split.txt"), "w") as fh:
        fh.write("\n".join(split_lines) + "\n")
    with open(os.path.join(out_dir, "landmarks.csv"), "w") as fh:
        fh.write("\n".join(lm_lines) + "\n")
