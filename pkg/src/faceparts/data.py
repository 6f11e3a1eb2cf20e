"""Dataset file parsing, priors, partial-variant generation, and batches.

File contracts (all plain text):
  - attribute file: count line, attribute-name line, then "image ±1 ×K" rows;
  - split manifest: "image 0|1|2" rows (train/val/test);
  - landmark CSV: one header line, then
    ``image,x1,y1,v1,...,x21,y21,v21,xtl,ytl,xbr,ybr`` rows (68 fields);
  - box manifest: header line, then "image,segment,x_min,y_min,x_max,y_max".

Labels are mapped to {0,1} at the parser boundary; pixels are scaled to
[0,1] at batch-assembly time.
"""

from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateAttribute,
    EmptyInput,
    EmptyIntersection,
    InsufficientVisibility,
    MalformedHeader,
    MalformedRow,
    MissingInput,
    RowArityMismatch,
)
from .geometry import (
    SEGMENTS,
    BoundingBox,
    FiducialSet,
    PartialVariant,
    SegmentId,
    crop_and_resize,
    hflip,
    make_partial,
    segment_box,
    segment_visibility,
)
from .raster import load_image, save_image

log = logging.getLogger(__name__)

SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2
SPLIT_NAMES = {SPLIT_TRAIN: "train", SPLIT_VAL: "val", SPLIT_TEST: "test"}
NUM_FIDUCIALS = 21
LANDMARK_FIELDS = 1 + NUM_FIDUCIALS * 3 + 4  # name + (x, y, v) per point + face box
LANDMARK_HEADER = ("image_name,"
                   + ",".join(f"x{k},y{k},v{k}" for k in range(1, 22))
                   + ",xtl,ytl,xbr,ybr")
BOX_HEADER = "image,segment,x_min,y_min,x_max,y_max"
VARIANTS = tuple(PartialVariant)


# ---------------------------------------------------------------------------
# annotations


@dataclass
class AttributeAnnotations:
    """Per-image binary labels, optionally joined with a split assignment."""

    attribute_names: tuple[str, ...]
    image_names: list[str]
    labels: np.ndarray               # (n, K) uint8 in {0, 1}
    splits: np.ndarray | None = None  # (n,) int8 in {0, 1, 2}

    @property
    def num_attributes(self) -> int:
        return len(self.attribute_names)

    def assign_splits(self, mapping: dict[str, int]) -> None:
        missing = [n for n in self.image_names if n not in mapping]
        if missing:
            raise MissingInput(
                f"{len(missing)} images lack a split assignment "
                f"(first: {missing[0]})")
        self.splits = np.array([mapping[n] for n in self.image_names],
                               dtype=np.int8)

    def split_indices(self, split: int) -> np.ndarray:
        if self.splits is None:
            raise MissingInput("split manifest not applied to annotations")
        return np.flatnonzero(self.splits == split)

    def subset(self, keep_names: set[str]) -> "AttributeAnnotations":
        keep = [i for i, n in enumerate(self.image_names) if n in keep_names]
        return AttributeAnnotations(
            attribute_names=self.attribute_names,
            image_names=[self.image_names[i] for i in keep],
            labels=self.labels[keep],
            splits=None if self.splits is None else self.splits[keep],
        )


def parse_attr_file(path) -> AttributeAnnotations:
    """Read a count/name-line/±1-rows attribute file."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise MissingInput(f"cannot read attribute file {path}: {exc}") from exc
    if len(lines) < 2:
        raise MalformedHeader(f"{path}: need a count line and a name line")
    try:
        count = int(lines[0].split()[0])
    except (ValueError, IndexError) as exc:
        raise MalformedHeader(f"{path}: first line must be a row count") from exc
    names = tuple(lines[1].split())
    if not names:
        raise MalformedHeader(f"{path}: attribute-name line is empty")
    k = len(names)

    image_names: list[str] = []
    rows: list[list[int]] = []
    for line_no, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 1 + k:
            raise RowArityMismatch(str(path), line_no, 1 + k, len(fields))
        values = []
        for tok in fields[1:]:
            if tok == "1":
                values.append(1)
            elif tok == "-1":
                values.append(0)
            else:
                raise MalformedRow(str(path), line_no,
                                   f"label must be 1 or -1, got {tok!r}")
        image_names.append(fields[0])
        rows.append(values)
    if len(rows) != count:
        raise MalformedHeader(
            f"{path}: header claims {count} rows, found {len(rows)}")
    return AttributeAnnotations(
        attribute_names=names,
        image_names=image_names,
        labels=np.array(rows, dtype=np.uint8).reshape(len(rows), k),
    )


def write_attr_file(path, annotations: AttributeAnnotations) -> None:
    lines = [str(len(annotations.image_names)),
             " ".join(annotations.attribute_names)]
    for name, row in zip(annotations.image_names, annotations.labels):
        lines.append(name + " " + " ".join("1" if v else "-1" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def parse_split_manifest(path) -> dict[str, int]:
    """Read "image 0|1|2" rows into a name → split mapping."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise MissingInput(f"cannot read split manifest {path}: {exc}") from exc
    mapping: dict[str, int] = {}
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 2:
            raise RowArityMismatch(str(path), line_no, 2, len(fields))
        name, tok = fields
        if tok not in ("0", "1", "2"):
            raise MalformedRow(str(path), line_no,
                               f"split must be 0, 1, or 2, got {tok!r}")
        if name in mapping:
            raise MalformedRow(str(path), line_no, f"duplicate image {name!r}")
        mapping[name] = int(tok)
    return mapping


def write_split_manifest(path, mapping: dict[str, int]) -> None:
    lines = [f"{name} {split}" for name, split in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# landmarks


@dataclass(frozen=True)
class LandmarkRecord:
    """One landmark row, not yet bound to a raster size."""

    points: tuple[tuple[float, float], ...]
    visibility: tuple[float, ...]
    face_box: BoundingBox

    def to_fiducials(self, image_width: int, image_height: int) -> FiducialSet:
        return FiducialSet(points=self.points, visibility=self.visibility,
                           face_box=self.face_box, image_width=image_width,
                           image_height=image_height)

    @classmethod
    def from_fiducials(cls, f: FiducialSet) -> "LandmarkRecord":
        return cls(points=f.points, visibility=f.visibility, face_box=f.face_box)


def parse_landmark_file(path, image_size: tuple[int, int] | None = None):
    """Read the landmark CSV into name → LandmarkRecord.

    The first line is always the header.  With ``image_size`` = (W, H) the
    records are bound immediately and the values are FiducialSet instead
    (convenient for fixed-size datasets).
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise MissingInput(f"cannot read landmark file {path}: {exc}") from exc
    if not lines:
        raise MalformedHeader(f"{path}: empty landmark file")
    out: dict[str, LandmarkRecord | FiducialSet] = {}
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != LANDMARK_FIELDS:
            raise RowArityMismatch(str(path), line_no, LANDMARK_FIELDS,
                                   len(fields))
        name = fields[0]
        if name in out:
            raise MalformedRow(str(path), line_no, f"duplicate image {name!r}")
        try:
            nums = [float(tok) for tok in fields[1:]]
        except ValueError as exc:
            raise MalformedRow(str(path), line_no,
                               f"non-numeric field: {exc}") from exc
        pts = tuple((nums[3 * i], nums[3 * i + 1]) for i in range(NUM_FIDUCIALS))
        vis = tuple(nums[3 * i + 2] for i in range(NUM_FIDUCIALS))
        try:
            record = LandmarkRecord(points=pts, visibility=vis,
                                    face_box=BoundingBox(*nums[-4:]))
        except ValueError as exc:
            raise MalformedRow(str(path), line_no, str(exc)) from exc
        if image_size is not None:
            out[name] = record.to_fiducials(image_size[0], image_size[1])
        else:
            out[name] = record
    return out


def write_landmark_file(path, records: dict) -> None:
    """Emit records (LandmarkRecord or FiducialSet) in insertion order."""
    lines = [LANDMARK_HEADER]
    for name, rec in records.items():
        fields = [name]
        for (x, y), v in zip(rec.points, rec.visibility):
            fields += [repr(float(x)), repr(float(y)), repr(float(v))]
        box = rec.face_box
        fields += [repr(float(box.x_min)), repr(float(box.y_min)),
                   repr(float(box.x_max)), repr(float(box.y_max))]
        lines.append(",".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# box manifests


def parse_bbox_file(path) -> list[tuple[str, SegmentId, BoundingBox]]:
    """Read "image,segment,x_min,y_min,x_max,y_max" rows (one header line)."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise MissingInput(f"cannot read box manifest {path}: {exc}") from exc
    if not lines:
        raise MalformedHeader(f"{path}: empty box manifest")
    out: list[tuple[str, SegmentId, BoundingBox]] = []
    valid = {seg.name: seg for seg in SegmentId}
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = [tok.strip() for tok in line.split(",")]
        if len(fields) != 6:
            raise RowArityMismatch(str(path), line_no, 6, len(fields))
        name, seg_name = fields[0], fields[1]
        if seg_name not in valid:
            raise MalformedRow(str(path), line_no,
                               f"unknown segment name {seg_name!r}")
        try:
            box = BoundingBox(*(float(tok) for tok in fields[2:]))
        except ValueError as exc:
            raise MalformedRow(str(path), line_no, str(exc)) from exc
        out.append((name, valid[seg_name], box))
    return out


def write_bbox_file(path, rows) -> None:
    lines = [BOX_HEADER]
    for name, seg, box in rows:
        lines.append(",".join([
            name, seg.name, repr(float(box.x_min)), repr(float(box.y_min)),
            repr(float(box.x_max)), repr(float(box.y_max))]))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# priors


def compute_priors(annotations: AttributeAnnotations,
                   split: int = SPLIT_TRAIN) -> np.ndarray:
    """Positive rate per attribute over one split; rejects 0/1 rates."""
    rows = annotations.labels[annotations.split_indices(split)]
    if rows.shape[0] == 0:
        raise EmptyInput(f"split {SPLIT_NAMES.get(split, split)} has no images")
    p = rows.mean(axis=0, dtype=np.float64)
    for j, pj in enumerate(p):
        if pj == 0.0 or pj == 1.0:
            raise DegenerateAttribute(
                f"attribute {annotations.attribute_names[j]!r} has prior {pj} "
                f"on split {SPLIT_NAMES.get(split, split)}")
    return p


# ---------------------------------------------------------------------------
# partial-variant generation


def generate_partial_dataset(dataset_dir, variant: PartialVariant, out_dir,
                             tau: float = 0.5) -> tuple[list[str], list[str]]:
    """Write an occluded copy of a dataset directory for one variant.

    Produces images/ (white outside the retained segment), an updated
    landmarks.csv (occluded fiducials marked invisible), a boxes.csv
    manifest of retained-segment boxes, and filtered copies of
    attributes.txt / split.txt when present.  Images whose retained
    segment is uncomputable are skipped and logged.  Returns
    (kept, skipped) image-name lists.
    """
    dataset_dir, out_dir = Path(dataset_dir), Path(out_dir)
    records = parse_landmark_file(dataset_dir / "landmarks.csv")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    kept: list[str] = []
    skipped: list[str] = []
    out_records: dict[str, LandmarkRecord] = {}
    box_rows = []
    for name in sorted(records):
        image_path = dataset_dir / "images" / name
        image = load_image(str(image_path))
        h, w = image.shape[:2]
        fids = records[name].to_fiducials(w, h)
        try:
            box = segment_box(fids, variant.kept_segment, tau)
            occluded, new_fids = make_partial(image, fids, variant, tau)
        except InsufficientVisibility as err:
            log.warning("skipping %s for %s: %s", name, variant.name, err)
            skipped.append(name)
            continue
        save_image(str(out_dir / "images" / name), occluded)
        out_records[name] = LandmarkRecord.from_fiducials(new_fids)
        box_rows.append((name, variant.kept_segment, box))
        kept.append(name)

    write_landmark_file(out_dir / "landmarks.csv", out_records)
    write_bbox_file(out_dir / "boxes.csv", box_rows)

    keep_set = set(kept)
    attr_path = dataset_dir / "attributes.txt"
    if attr_path.exists():
        if skipped:
            write_attr_file(out_dir / "attributes.txt",
                            parse_attr_file(attr_path).subset(keep_set))
        else:
            shutil.copyfile(attr_path, out_dir / "attributes.txt")
    split_path = dataset_dir / "split.txt"
    if split_path.exists():
        mapping = parse_split_manifest(split_path)
        write_split_manifest(out_dir / "split.txt",
                             {n: s for n, s in mapping.items() if n in keep_set})
    return kept, skipped


# ---------------------------------------------------------------------------
# dataset directories


@dataclass
class DataSource:
    """A dataset directory bound to parsed annotations and landmarks."""

    image_dir: Path
    annotations: AttributeAnnotations
    landmarks: dict


def load_dataset_dir(root, image_size: tuple[int, int] | None = None) -> DataSource:
    """Open a dataset directory: images/, attributes.txt, split.txt, landmarks.csv."""
    root = Path(root)
    annotations = parse_attr_file(root / "attributes.txt")
    split_path = root / "split.txt"
    if split_path.exists():
        annotations.assign_splits(parse_split_manifest(split_path))
    landmarks = parse_landmark_file(root / "landmarks.csv", image_size=image_size)
    return DataSource(image_dir=root / "images", annotations=annotations,
                      landmarks=landmarks)


# ---------------------------------------------------------------------------
# batch assembly


@dataclass(frozen=True)
class BatchConfig:
    batch_size: int = 32
    flip_prob: float = 0.0
    partial_mix: float = 0.0
    seed: int = 0
    tau: float = 0.5
    face_size: int = 196
    segment_size: int = 64
    dtype: type = np.float32


@dataclass
class Batch:
    """One training/evaluation batch in model-ready NCHW layout."""

    names: list[str]
    faces: np.ndarray       # (B, 3, face, face) in [0, 1]
    segments: np.ndarray    # (B, 14, 3, seg, seg); zeros where invisible
    visibility: np.ndarray  # (B, 14) bool
    labels: np.ndarray      # (B, K) float


def sample_tensors(image: np.ndarray, fids: FiducialSet, cfg: BatchConfig):
    """Face crop, 14 segment crops, and visibility for one loaded image.

    ``image`` is HxWx3 float in [0, 1].  Invisible (or raster-missing)
    segments become zero blocks with visibility False.
    """
    face = crop_and_resize(image, fids.face_box, cfg.face_size, cfg.face_size)
    face = np.transpose(face, (2, 0, 1)).astype(cfg.dtype)
    seg_size = cfg.segment_size
    segments = np.zeros((len(SEGMENTS), 3, seg_size, seg_size), dtype=cfg.dtype)
    vis_map = segment_visibility(fids, cfg.tau)
    visibility = np.zeros(len(SEGMENTS), dtype=bool)
    for idx, seg in enumerate(SEGMENTS):
        if not vis_map[seg]:
            continue
        try:
            crop = crop_and_resize(image, segment_box(fids, seg, cfg.tau),
                                   seg_size, seg_size)
        except EmptyIntersection:
            continue
        segments[idx] = np.transpose(crop, (2, 0, 1)).astype(cfg.dtype)
        visibility[idx] = True
    return face, segments, visibility


def load_pixels(image_dir, name: str) -> np.ndarray:
    """Load an image as HxWx3 float in [0, 1]."""
    image = load_image(str(Path(image_dir) / name))
    if image.ndim == 2:
        image = np.stack([image] * 3, axis=-1)
    return image.astype(np.float64) / 255.0


def draw_augmentations(rng: np.random.Generator, cfg: BatchConfig):
    """Per-sample augmentation decision: (flip?, variant-or-None).

    All three random variables are drawn unconditionally so the stream
    advances identically for every configuration.
    """
    flip_draw = rng.random()
    mix_draw = rng.random()
    variant = VARIANTS[rng.integers(len(VARIANTS))]
    return flip_draw < cfg.flip_prob, (
        variant if mix_draw < cfg.partial_mix else None)


def make_batches(image_dir, annotations: AttributeAnnotations,
                 landmarks: dict, split: int, cfg: BatchConfig):
    """Yield one epoch of batches in seeded-shuffle order.

    Augmentations per sample: horizontal flip with ``flip_prob`` (fiducial
    indices and segment identities remapped); with ``partial_mix``
    probability the sample is occluded to one of the six partial variants
    (chosen uniformly; labels unchanged).  Samples whose drawn variant is
    uncomputable stay unoccluded.  The stream is deterministic in
    ``cfg.seed``.
    """
    indices = annotations.split_indices(split)
    if indices.size == 0:
        raise EmptyInput(f"split {SPLIT_NAMES.get(split, split)} has no images")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(indices)
    for start in range(0, order.size, cfg.batch_size):
        chunk = order[start:start + cfg.batch_size]
        names, faces, segs, vis, labels = [], [], [], [], []
        for idx in chunk:
            name = annotations.image_names[idx]
            if name not in landmarks:
                raise MissingInput(f"no landmarks for image {name}")
            do_flip, variant = draw_augmentations(rng, cfg)
            image = load_pixels(image_dir, name)
            h, w = image.shape[:2]
            rec = landmarks[name]
            fids = rec if isinstance(rec, FiducialSet) else rec.to_fiducials(w, h)
            if do_flip:
                image, fids, _ = hflip(image, fids)
            if variant is not None:
                try:
                    image, fids = make_partial(image, fids, variant, cfg.tau)
                except InsufficientVisibility:
                    log.debug("sample %s: variant %s uncomputable, left "
                              "unoccluded", name, variant.name)
            face, segments, visibility = sample_tensors(image, fids, cfg)
            names.append(name)
            faces.append(face)
            segs.append(segments)
            vis.append(visibility)
            labels.append(annotations.labels[idx])
        yield Batch(
            names=names,
            faces=np.stack(faces),
            segments=np.stack(segs),
            visibility=np.stack(vis),
            labels=np.stack(labels).astype(np.float64),
        )
