"""The multi-branch attribute model: 14 segment nets, a full-face net, and
a global fusion net, trained jointly against masked, prior-weighted BCE.

Data flow per image: each 64x64 segment crop runs through its own conv
trunk to a feature map C_i, scored by a GAP->dense->sigmoid head.  The
196x196 full face runs through a deeper trunk to F_0 (its GAP vector) and
its own K-way head.  The global predictor concatenates all C_i maps,
convolves once more, GAPs to F_s, merges with F_0, and scores all K
attributes through a dense-256/dropout head.  Invisible or dropped
segments contribute zero tensors, so every branch stays shape-stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingFullFace, ShapeMismatch
from .geometry import SEGMENTS, SegmentId
from .nn.layers import (
    BatchNorm,
    Conv3x3,
    Dense,
    Dropout,
    GlobalAvgPool,
    ReLU,
    Sigmoid,
    weighted_bce,
)
from .nn.network import LayerSpec, Network, NetworkSpec

SEGMENT_INPUT = 64
FULL_INPUT = 196
NUM_SEGMENTS = 14
NUM_PREDICTORS = 16
FULL_IDX = SegmentId.FULL.value   # 0
GP_IDX = SegmentId.GP.value       # 15
DEFAULT_SEGMENT_DROPOUT = 0.3
GP_DROPOUT_RATE = 0.2


def _conv_block(channels: int) -> tuple[LayerSpec, ...]:
    return (LayerSpec("conv3", channels=channels), LayerSpec("bn"),
            LayerSpec("relu"))


def segment_trunk_spec(width_scale: float = 1.0) -> NetworkSpec:
    """Six-conv trunk for 64x64 segment crops; output map is 7x7."""
    return NetworkSpec(
        name="segment_trunk",
        in_channels=3,
        in_hw=(SEGMENT_INPUT, SEGMENT_INPUT),
        layers=(
            *_conv_block(32),
            LayerSpec("maxpool3"),
            *_conv_block(64),
            *_conv_block(64),
            LayerSpec("maxpool3"),
            *_conv_block(128),
            LayerSpec("maxpool3"),
            *_conv_block(128),
            *_conv_block(256),
        ),
        width_scale=width_scale,
    )


def full_trunk_spec(width_scale: float = 1.0) -> NetworkSpec:
    """Seven-conv trunk for the 196x196 full face; output map is 5x5."""
    return NetworkSpec(
        name="full_trunk",
        in_channels=3,
        in_hw=(FULL_INPUT, FULL_INPUT),
        layers=(
            *_conv_block(32),
            LayerSpec("maxpool3"),
            *_conv_block(64),
            LayerSpec("maxpool3"),
            *_conv_block(64),
            LayerSpec("maxpool3"),
            *_conv_block(128),
            LayerSpec("maxpool3"),
            *_conv_block(128),
            *_conv_block(256),
            LayerSpec("maxpool3"),
            *_conv_block(256),
        ),
        width_scale=width_scale,
    )


@dataclass(frozen=True)
class AttributeMask:
    """Which attributes each of the 16 predictors scores.

    ``table[i, a]`` is True when predictor i predicts attribute a.  FULL
    and GP always predict everything.  A segment row may be empty when few
    attributes are spread over many segments; such a branch keeps a
    zero-width head and trains purely as a feature extractor for the
    global predictor.
    """

    table: np.ndarray  # (16, K) bool

    def __post_init__(self):
        t = self.table
        if t.ndim != 2 or t.shape[0] != NUM_PREDICTORS or t.dtype != np.bool_:
            raise ShapeMismatch(f"mask table must be (16, K) bool, got {t.shape}")
        if not (t[FULL_IDX].all() and t[GP_IDX].all()):
            raise ValueError("FULL and GP must predict all attributes")

    @classmethod
    def full(cls, num_attributes: int) -> "AttributeMask":
        return cls(np.ones((NUM_PREDICTORS, num_attributes), dtype=bool))

    @property
    def num_attributes(self) -> int:
        return self.table.shape[1]

    def indices(self, predictor: int) -> np.ndarray:
        return np.flatnonzero(self.table[predictor])


@dataclass
class ForwardResult:
    """Everything one forward pass produces, per predictor."""

    scores: list[np.ndarray]        # 16 arrays of (N, |N_i|)
    segment_maps: list[np.ndarray]  # 14 pre-GAP maps C_i, (N, C, 7, 7)
    full_map: np.ndarray            # pre-GAP map of the full branch
    f0: np.ndarray                  # (N, C) GAP of the full branch
    fs: np.ndarray                  # (N, C') GAP of the fused segment conv


class _Head:
    """GAP -> dense -> sigmoid score head over a pre-GAP feature map."""

    def __init__(self, in_dim: int, out_dim: int, rng, dtype):
        self.gap = GlobalAvgPool()
        self.dense = Dense(in_dim, out_dim, rng, dtype)
        self.sigmoid = Sigmoid()

    def forward(self, feature_map, train=False):
        pooled = self.gap.forward(feature_map, train=train)
        return self.sigmoid.forward(self.dense.forward(pooled, train=train),
                                    train=train)

    def backward(self, dscores):
        return self.gap.backward(self.dense.backward(
            self.sigmoid.backward(dscores)))


class SplitFaceModel:
    """All trainable pieces plus masks and priors, wired for joint training."""

    def __init__(self, num_attributes: int, width_scale: float = 1.0,
                 seed: int = 0, dtype=np.float32,
                 masks: AttributeMask | None = None):
        self.num_attributes = num_attributes
        self.width_scale = width_scale
        self.dtype = dtype
        self.seed = seed
        self.masks = masks if masks is not None else AttributeMask.full(num_attributes)
        self.priors = np.full(num_attributes, 0.5)
        rng = np.random.default_rng(seed)
        self._dropout_rng = np.random.default_rng(rng.integers(2**63))

        seg_spec = segment_trunk_spec(width_scale)
        full_spec = full_trunk_spec(width_scale)
        self.seg_channels = seg_spec.output_shape()[0]
        self.full_channels = full_spec.output_shape()[0]
        self.gp_channels = seg_spec.scaled(512)
        self.merge_width = seg_spec.scaled(256)

        self.seg_trunks = [Network.build(seg_spec, rng, dtype)
                           for _ in range(NUM_SEGMENTS)]
        self.seg_heads = [
            _Head(self.seg_channels, len(self.masks.indices(i + 1)), rng, dtype)
            for i in range(NUM_SEGMENTS)
        ]
        self.full_trunk = Network.build(full_spec, rng, dtype)
        self.full_gap = GlobalAvgPool()
        self.full_head_dense = Dense(self.full_channels, num_attributes, rng, dtype)
        self.full_head_sigmoid = Sigmoid()

        concat_ch = NUM_SEGMENTS * self.seg_channels
        self.gp_conv = Conv3x3(concat_ch, self.gp_channels, rng, dtype)
        self.gp_bn = BatchNorm(self.gp_channels, dtype)
        self.gp_relu = ReLU()
        self.gp_gap = GlobalAvgPool()
        self.gp_merge = Dense(self.full_channels + self.gp_channels,
                              self.merge_width, rng, dtype)
        self.gp_merge_relu = ReLU()
        self.gp_dropout = Dropout(GP_DROPOUT_RATE, self._dropout_rng)
        self.gp_head = Dense(self.merge_width, num_attributes, rng, dtype)
        self.gp_sigmoid = Sigmoid()

    # -- forward ----------------------------------------------------------

    def forward_segment(self, index: int, crops: np.ndarray, train=False):
        """Scores and pre-GAP map of segment predictor ``index`` (1..14)."""
        if not 1 <= index <= NUM_SEGMENTS:
            raise ValueError(f"segment predictor index {index} outside 1..14")
        c = self.seg_trunks[index - 1].forward(crops, train=train)
        scores = self.seg_heads[index - 1].forward(c, train=train)
        return scores, c

    def forward_full(self, faces: np.ndarray, train=False):
        """K scores, F_0, and the pre-GAP map of the full-face branch."""
        fmap = self.full_trunk.forward(faces, train=train)
        f0 = self.full_gap.forward(fmap, train=train)
        scores = self.full_head_sigmoid.forward(
            self.full_head_dense.forward(f0, train=train), train=train)
        return scores, f0, fmap

    def forward_global(self, f0: np.ndarray, segment_maps, train=False):
        """K scores of the fused global predictor plus F_s."""
        concat = np.concatenate(segment_maps, axis=1)
        h = self.gp_relu.forward(
            self.gp_bn.forward(self.gp_conv.forward(concat, train=train),
                               train=train), train=train)
        fs = self.gp_gap.forward(h, train=train)
        merged = np.concatenate([f0, fs], axis=1)
        z = self.gp_merge_relu.forward(
            self.gp_merge.forward(merged, train=train), train=train)
        z = self.gp_dropout.forward(z, train=train)
        scores = self.gp_sigmoid.forward(self.gp_head.forward(z, train=train),
                                         train=train)
        return scores, fs

    def forward_all(self, segments: np.ndarray, faces: np.ndarray,
                    train: bool = False) -> ForwardResult:
        """Full forward pass.

        ``segments`` is (N, 14, 3, 64, 64) with zero blocks for invisible
        or dropped segments; ``faces`` is (N, 3, 196, 196).
        """
        if faces is None:
            raise MissingFullFace("the full-face input is required")
        if segments.ndim != 5 or segments.shape[1] != NUM_SEGMENTS:
            raise ShapeMismatch(
                f"segments must be (N, 14, 3, H, W), got {segments.shape}")
        if faces.shape[0] != segments.shape[0]:
            raise ShapeMismatch("segment/face batch sizes differ")

        full_scores, f0, full_map = self.forward_full(faces, train=train)
        seg_scores, seg_maps = [], []
        for i in range(1, NUM_SEGMENTS + 1):
            s, c = self.forward_segment(i, segments[:, i - 1], train=train)
            seg_scores.append(s)
            seg_maps.append(c)
        gp_scores, fs = self.forward_global(f0, seg_maps, train=train)
        scores = [full_scores] + seg_scores + [gp_scores]
        return ForwardResult(scores=scores, segment_maps=seg_maps,
                             full_map=full_map, f0=f0, fs=fs)

    # -- loss / backward ---------------------------------------------------

    def model_loss(self, result: ForwardResult, labels: np.ndarray) -> float:
        """Batch-mean prior-weighted BCE summed over all 16 predictors."""
        return self.loss_and_score_grads(result, labels)[0]

    def loss_and_score_grads(self, result: ForwardResult, labels: np.ndarray):
        """Loss as in :meth:`model_loss` plus per-predictor score gradients.

        Per attribute j the sample weight is p_j for negatives and 1-p_j
        for positives, with p the training-split priors.
        """
        n = labels.shape[0]
        if labels.shape != (n, self.num_attributes):
            raise ShapeMismatch(
                f"labels {labels.shape} != ({n}, {self.num_attributes})")
        weights_full = np.where(labels == 1, 1.0 - self.priors, self.priors)
        total = 0.0
        grads = []
        for i in range(NUM_PREDICTORS):
            cols = self.masks.indices(i)
            loss, grad = weighted_bce(result.scores[i],
                                      labels[:, cols].astype(np.float64),
                                      weights_full[:, cols])
            total += loss / n
            grads.append(grad / n)
        return total, grads

    def backward(self, score_grads: list[np.ndarray]) -> None:
        """Propagate per-predictor score gradients through the whole DAG."""
        # Global predictor first: it alone feeds gradients back into the
        # segment maps and F_0.
        dz = self.gp_head.backward(self.gp_sigmoid.backward(score_grads[GP_IDX]))
        dz = self.gp_merge_relu.backward(self.gp_dropout.backward(dz))
        dmerged = self.gp_merge.backward(dz)
        df0_gp = dmerged[:, : self.full_channels]
        dfs = dmerged[:, self.full_channels:]
        dh = self.gp_bn.backward(self.gp_relu.backward(self.gp_gap.backward(dfs)))
        dconcat = self.gp_conv.backward(dh)

        # Full-face branch: head gradient plus the GP contribution to F_0.
        df0 = self.full_head_dense.backward(
            self.full_head_sigmoid.backward(score_grads[FULL_IDX]))
        df0 = df0 + df0_gp
        dmap = self.full_gap.backward(df0)
        self.full_trunk.backward(dmap)

        # Segment branches: own head gradient plus their slice of the GP
        # concat gradient.
        c = self.seg_channels
        for i in range(NUM_SEGMENTS):
            dci = self.seg_heads[i].backward(score_grads[i + 1])
            dci = dci + dconcat[:, i * c:(i + 1) * c]
            self.seg_trunks[i].backward(dci)

    # -- parameter plumbing -------------------------------------------------

    def _glue_layers(self) -> dict[str, object]:
        out = {}
        for i in range(NUM_SEGMENTS):
            out[f"seg{i + 1:02d}.head"] = self.seg_heads[i].dense
        out["full.head"] = self.full_head_dense
        out["gp.conv"] = self.gp_conv
        out["gp.bn"] = self.gp_bn
        out["gp.merge"] = self.gp_merge
        out["gp.head"] = self.gp_head
        return out

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for i in range(NUM_SEGMENTS):
            for k, v in self.seg_trunks[i].named_params().items():
                out[f"seg{i + 1:02d}.trunk.{k}"] = v
        for k, v in self.full_trunk.named_params().items():
            out[f"full.trunk.{k}"] = v
        for prefix, layer in self._glue_layers().items():
            for k, v in layer.params().items():
                out[f"{prefix}.{k}"] = v
        return out

    def named_grads(self) -> dict[str, np.ndarray]:
        out = {}
        for i in range(NUM_SEGMENTS):
            for k, v in self.seg_trunks[i].named_grads().items():
                out[f"seg{i + 1:02d}.trunk.{k}"] = v
        for k, v in self.full_trunk.named_grads().items():
            out[f"full.trunk.{k}"] = v
        for prefix, layer in self._glue_layers().items():
            for k, v in layer.grads().items():
                out[f"{prefix}.{k}"] = v
        return out

    def named_state(self) -> dict[str, np.ndarray]:
        out = {}
        for i in range(NUM_SEGMENTS):
            for k, v in self.seg_trunks[i].named_state().items():
                out[f"seg{i + 1:02d}.trunk.{k}"] = v
        for k, v in self.full_trunk.named_state().items():
            out[f"full.trunk.{k}"] = v
        for k, v in self.gp_bn.state().items():
            out[f"gp.bn.{k}"] = v
        return out

    def all_tensors(self) -> dict[str, np.ndarray]:
        return {**self.named_params(), **self.named_state()}

    def load_tensors(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.all_tensors()
        for name, value in arrays.items():
            if name not in own:
                raise ShapeMismatch(f"unknown tensor {name}")
            if own[name].shape != value.shape:
                raise ShapeMismatch(
                    f"{name}: shape {value.shape} != {own[name].shape}")
            own[name][...] = value

    # -- structure edits ----------------------------------------------------

    def rebuild_heads(self, new_masks: AttributeMask) -> dict[str, np.ndarray]:
        """Resize every score head to the new masks, keeping surviving columns.

        Returns {param name: old column indices} so optimizer moments can be
        sliced the same way.
        """
        if new_masks.num_attributes != self.num_attributes:
            raise ShapeMismatch("mask attribute count changed")
        column_map: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(self.seed + 1)
        for i in range(NUM_PREDICTORS):
            old_cols = self.masks.indices(i)
            new_cols = new_masks.indices(i)
            if i == FULL_IDX or i == GP_IDX:
                continue  # always full K; nothing to rebuild
            head = self.seg_heads[i - 1].dense
            positions = []
            for a in new_cols:
                where = np.flatnonzero(old_cols == a)
                if where.size == 0:
                    raise ValueError(
                        f"attribute {a} was not predicted by predictor {i} before")
                positions.append(int(where[0]))
            positions = np.asarray(positions, dtype=np.intp)
            new_dense = Dense(head.in_dim, len(new_cols), rng, self.dtype)
            new_dense.weight[...] = head.weight[:, positions]
            new_dense.bias[...] = head.bias[positions]
            self.seg_heads[i - 1].dense = new_dense
            column_map[f"seg{i:02d}.head.weight"] = positions
            column_map[f"seg{i:02d}.head.bias"] = positions
        self.masks = new_masks
        return column_map

    # -- segment dropout ----------------------------------------------------

    def segment_dropout_mask(self, rng: np.random.Generator,
                             visible: np.ndarray,
                             prob: float = DEFAULT_SEGMENT_DROPOUT) -> np.ndarray:
        """Keep-mask over (N, 14): visible segments survive with prob 1-p."""
        if not 0.0 <= prob <= 1.0:
            raise ValueError(f"dropout probability {prob} outside [0, 1]")
        keep = rng.random(visible.shape) >= prob
        return visible.astype(bool) & keep

    def set_train_dropout(self, frozen: bool) -> None:
        self.gp_dropout.freeze_mask = frozen

    def reseed_dropout(self, seed) -> None:
        """Restart the GP-head dropout stream from a deterministic seed.

        The stream advances with every training forward pass and is not
        part of checkpoints, so callers that need run-to-run or
        resume-from-checkpoint reproducibility reseed it at well-defined
        boundaries.
        """
        self._dropout_rng = np.random.default_rng(seed)
        self.gp_dropout.rng = self._dropout_rng
