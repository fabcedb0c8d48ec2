"""End-to-end dense motion estimation between consecutive frames.

Per pyramid level: local cross-correlation between the two frames' features,
a channel projection, and a global scan block. Levels are fused coarse to
fine into a stride-8 map, and a final convolution regresses a 2-channel
displacement field in full-resolution pixel units (channel 0 horizontal,
channel 1 vertical).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import ssm
from .tensor import (
    Tensor,
    SgdConfig,
    absolute,
    as_tensor,
    backward,
    concat,
    conv2d,
    init_param,
    make_op,
    mul,
    reduce_mean,
    sgd_step,
    sub,
    upsample_bilinear2x,
    _accum,
    _check_finite,
    _record,
)

STRIDES = (8, 16, 32)
MOTION_MAP_MAGIC = b"MMAP"


@dataclass
class FeaturePyramid:
    """Per-frame feature maps at strides 8/16/32, each (C, H/s, W/s)."""

    levels: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.levels) != len(STRIDES):
            raise ValueError(f"expected {len(STRIDES)} pyramid levels, got {len(self.levels)}")
        h8, w8 = self.levels[0].shape[1:]
        for lvl, stride in zip(self.levels, STRIDES):
            if lvl.ndim != 3:
                raise ValueError(f"pyramid level must be (C,H,W), got shape {lvl.shape}")
            if lvl.shape[1] * stride != h8 * 8 or lvl.shape[2] * stride != w8 * 8:
                raise ValueError(f"level sizes are not exact stride divisions: {lvl.shape} at /{stride}")

    @property
    def image_size(self) -> tuple[int, int]:
        return self.levels[0].shape[1] * 8, self.levels[0].shape[2] * 8


@dataclass
class MotionMap:
    """Stride-8 displacement grid; values[(i, j)] = (dx, dy) in full-res pixels."""

    values: np.ndarray
    stride: int = 8

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[2] != 2:
            raise ValueError(f"motion map must be (rows, cols, 2), got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("motion map contains non-finite values")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class MotionNetConfig:
    correlation_radius: int = 3
    width: int = 32
    state_size: int = 8
    blocks_per_level: int = 1
    scan_mode: str = "both"  # none | vertical | horizontal | both

    def __post_init__(self):
        if self.correlation_radius < 1:
            raise ValueError(f"correlation_radius must be >= 1, got {self.correlation_radius}")
        if min(self.width, self.state_size, self.blocks_per_level) < 1:
            raise ValueError("width, state_size and blocks_per_level must all be >= 1")
        if self.scan_mode not in ("none", "vertical", "horizontal", "both"):
            raise ValueError(f"unknown scan_mode {self.scan_mode!r}")

    @property
    def scan_directions(self) -> tuple[str, ...]:
        return {
            "none": (),
            "vertical": (ssm.VERTICAL,),
            "horizontal": (ssm.HORIZONTAL,),
            "both": (ssm.VERTICAL, ssm.HORIZONTAL),
        }[self.scan_mode]


def cross_correlation(feat_t, feat_t1, radius: int) -> Tensor:
    """Local cost volume: inner products against (2r+1)^2 shifted neighbors.

    Output channel k = (u+r)*(2r+1) + (v+r) holds <F_t[i,j], F_t1[i+u, j+v]>
    / sqrt(C); shifts that leave the map contribute zero.
    """
    a, b = as_tensor(feat_t), as_tensor(feat_t1)
    if a.shape != b.shape or a.data.ndim != 3:
        raise ValueError(f"cross_correlation: shape mismatch {a.shape} vs {b.shape}")
    if radius < 1:
        raise ValueError(f"cross_correlation: radius must be >= 1, got {radius}")
    _check_finite("cross_correlation", a, b)
    c, h, w = a.shape
    span = 2 * radius + 1
    scale = 1.0 / np.sqrt(c)

    def fwd(ad, bd):
        bp = np.pad(bd, ((0, 0), (radius, radius), (radius, radius)))
        out = np.empty((span * span, h, w))
        for u in range(-radius, radius + 1):
            for v in range(-radius, radius + 1):
                k = (u + radius) * span + (v + radius)
                shifted = bp[:, radius + u:radius + u + h, radius + v:radius + v + w]
                out[k] = (ad * shifted).sum(axis=0) * scale
        return out

    out = make_op("cross_correlation", (a, b), fwd(a.data, b.data), None)

    def bw(g):
        bp = np.pad(b.data, ((0, 0), (radius, radius), (radius, radius)))
        ga = np.zeros_like(a.data)
        gbp = np.zeros_like(bp)
        for u in range(-radius, radius + 1):
            for v in range(-radius, radius + 1):
                k = (u + radius) * span + (v + radius)
                gk = g[k] * scale
                ga += gk[None] * bp[:, radius + u:radius + u + h, radius + v:radius + v + w]
                gbp[:, radius + u:radius + u + h, radius + v:radius + v + w] += gk[None] * a.data
        _accum(a, ga)
        _accum(b, gbp[:, radius:radius + h, radius:radius + w])

    out._backward = bw
    _record("cross_correlation", fwd, (a, b), out)
    return out


class MotionNet:
    """The full displacement-field network over two feature pyramids."""

    def __init__(self, config: MotionNetConfig | None = None,
                 in_channels: int | tuple[int, int, int] = 8, seed: int = 0):
        self.config = config or MotionNetConfig()
        if isinstance(in_channels, int):
            in_channels = (in_channels,) * 3
        self.in_channels = tuple(in_channels)
        self.seed = seed
        cfg = self.config
        d = cfg.width
        corr_ch = (2 * cfg.correlation_radius + 1) ** 2
        # projection convs are bias-free so zero features propagate to zero maps
        directions = cfg.scan_directions
        self.levels = []
        for stride, cin in zip(STRIDES, self.in_channels):
            name = f"level{stride}"
            blocks = []
            for bi in range(cfg.blocks_per_level):
                blocks.append({
                    direction: ssm.SsmParams.create(
                        d, cfg.state_size, f"{name}.block{bi}.{direction[0]}", seed)
                    for direction in directions
                })
            self.levels.append({
                "name": name,
                "app_w": init_param(f"{name}.app_w", (d, cin, 1, 1), cin, seed),
                "mix_w": init_param(f"{name}.mix_w", (d, corr_ch + d, 1, 1), corr_ch + d, seed),
                "blocks": blocks,
            })
        self.fuse_w = [init_param(f"fuse{i}.w", (d, d, 1, 1), d, seed) for i in range(2)]
        self.head_w = init_param("head.w", (2, d, 3, 3), d * 9, seed)
        self.head_b = init_param("head.b", (2,), d * 9, seed)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for level in self.levels:
            name = level["name"]
            out[f"{name}.app_w"] = level["app_w"]
            out[f"{name}.mix_w"] = level["mix_w"]
            for bi, block in enumerate(level["blocks"]):
                for direction, params in block.items():
                    out.update(params.parameters(f"{name}.block{bi}.{direction[0]}"))
        for i in range(2):
            out[f"fuse{i}.w"] = self.fuse_w[i]
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {missing[:4]}...")
        for name, tensor in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {tensor.shape}")
            tensor.data = value.copy()
            tensor.grad = None

    def level_motion_features(self, level_idx: int, feat_t, feat_t1) -> Tensor:
        """Cost volume + appearance projection -> width-d map -> scan block."""
        level = self.levels[level_idx]
        cost = cross_correlation(feat_t, feat_t1, self.config.correlation_radius)
        appearance = conv2d(feat_t1, level["app_w"])
        mixed = conv2d(concat([cost, appearance], axis=0), level["mix_w"])
        directions = self.config.scan_directions
        for block in level["blocks"]:
            if directions:
                mixed = ssm.motion_mamba_block(mixed, block.get(ssm.VERTICAL),
                                               block.get(ssm.HORIZONTAL), directions)
        return mixed

    def pyramid_fuse(self, levels: list[Tensor]) -> Tensor:
        """Coarse-to-fine additive fusion onto the stride-8 grid."""
        f8, f16, f32 = levels
        width = self.config.width
        for t in levels:
            if t.shape[0] != width:
                raise ValueError(f"pyramid_fuse: expected width {width}, got {t.shape[0]}")
        up16 = conv2d(upsample_bilinear2x(f32), self.fuse_w[0]) + f16
        return conv2d(upsample_bilinear2x(up16), self.fuse_w[1]) + f8

    def motion_head(self, fused: Tensor) -> Tensor:
        """3x3 convolution to the 2-channel displacement map (pixels).

        The convolution regresses displacements in stride-cell units and a
        fixed gain converts to pixels; plain SGD conditions far better when
        the weights live at O(1) scale.
        """
        return mul(conv2d(fused, self.head_w, self.head_b), float(STRIDES[0]))

    def forward(self, pyr_t: FeaturePyramid, pyr_t1: FeaturePyramid) -> Tensor:
        feats = [
            self.level_motion_features(i, Tensor(pyr_t.levels[i]), Tensor(pyr_t1.levels[i]))
            for i in range(3)
        ]
        return self.motion_head(self.pyramid_fuse(feats))

    def predict(self, pyr_t: FeaturePyramid, pyr_t1: FeaturePyramid) -> MotionMap:
        pred = self.forward(pyr_t, pyr_t1)
        return MotionMap(np.moveaxis(pred.data, 0, 2).copy())


# ---------------------------------------------------------------------------
# ground truth and loss


def gt_motion_map(boxes_t: dict, boxes_t1: dict, background_flow: np.ndarray,
                  out_size: tuple[int, int], stride: int = 8) -> MotionMap:
    """Overlay per-object center offsets on the cell-averaged background flow.

    boxes_* map identity -> (cx, cy, w, h) in pixels. Each identity present in
    both frames paints its offset into every stride cell whose center falls
    inside its frame-t box; larger boxes are painted first so smaller ones win
    overlaps.
    """
    rows, cols = out_size
    flow = np.asarray(background_flow, dtype=np.float64)
    if flow.shape != (rows * stride, cols * stride, 2):
        raise ValueError(
            f"background flow shape {flow.shape} does not cover a {rows}x{cols} stride-{stride} grid")
    grid = flow.reshape(rows, stride, cols, stride, 2).mean(axis=(1, 3)).copy()

    painted = []
    for ident, box in boxes_t.items():
        if ident not in boxes_t1:
            continue
        cx, cy, w, h = box
        if w <= 0 or h <= 0:
            raise ValueError(f"malformed box for identity {ident}: w={w}, h={h}")
        cx1, cy1 = boxes_t1[ident][0], boxes_t1[ident][1]
        painted.append((w * h, ident, (cx, cy, w, h), (cx1 - cx, cy1 - cy)))
    # decreasing area; ties broken by identity so the order is reproducible
    painted.sort(key=lambda item: (-item[0], item[1]))

    centers_x = (np.arange(cols) + 0.5) * stride
    centers_y = (np.arange(rows) + 0.5) * stride
    for _, _, (cx, cy, w, h), (dx, dy) in painted:
        in_x = np.abs(centers_x - cx) <= w / 2.0
        in_y = np.abs(centers_y - cy) <= h / 2.0
        grid[np.ix_(in_y, in_x)] = (dx, dy)
    return MotionMap(grid, stride=stride)


def motion_l1_loss(pred, gt) -> Tensor:
    """Mean absolute displacement error over all cells and both channels."""
    if isinstance(gt, MotionMap):
        gt = gt.values
    gt = np.asarray(gt, dtype=np.float64)
    target = np.moveaxis(gt, 2, 0) if gt.ndim == 3 and gt.shape[2] == 2 else gt
    if isinstance(pred, MotionMap):
        pred = np.moveaxis(pred.values, 2, 0)
    pred = as_tensor(pred)
    if pred.shape != target.shape:
        raise ValueError(f"motion_l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    return reduce_mean(absolute(sub(pred, Tensor(target))))


def train_motion(sequences, net: MotionNet, config: SgdConfig, seed: int = 0,
                 pair_stride: int = 1) -> list[tuple[int, float]]:
    """SGD training over consecutive-frame pairs; returns (epoch, mean L1) curve.

    Each sequence must expose n_frames, pyramids[t], annotation_boxes(t) and
    flow_field(t).
    """
    sequences = list(sequences)
    if not sequences:
        raise ValueError("train_motion: empty dataset")
    pairs = [
        (si, t)
        for si, seq in enumerate(sequences)
        for t in range(0, seq.n_frames - 1, pair_stride)
    ]
    if not pairs:
        raise ValueError("train_motion: no consecutive-frame pairs available")
    rng = np.random.default_rng(seed)
    params = net.parameters()
    curve: list[tuple[int, float]] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            inv = 1.0 / len(chunk)
            for idx in chunk:
                si, t = pairs[idx]
                seq = sequences[si]
                pred = net.forward(seq.pyramids[t], seq.pyramids[t + 1])
                rows, cols = pred.shape[1], pred.shape[2]
                target = gt_motion_map(
                    seq.annotation_boxes(t), seq.annotation_boxes(t + 1),
                    seq.flow_field(t), (rows, cols))
                loss = motion_l1_loss(pred, target)
                epoch_losses.append(loss.item())
                backward(mul(loss, inv))
            sgd_step(params, config)
        curve.append((epoch, float(np.mean(epoch_losses))))
    return curve


# ---------------------------------------------------------------------------
# motion map files


def save_motion_map(path, values) -> None:
    """Binary dump: magic, u32 rows/cols/channels, float32 row-major values."""
    if isinstance(values, MotionMap):
        values = values.values
    arr = np.asarray(values)
    if arr.ndim != 3:
        raise ValueError(f"expected (rows, cols, channels), got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(MOTION_MAP_MAGIC)
        f.write(struct.pack("<III", arr.shape[0], arr.shape[1], arr.shape[2]))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_motion_map(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MOTION_MAP_MAGIC:
        raise ValueError(f"not a motion map file: bad magic {blob[:4]!r}")
    rows, cols, channels = struct.unpack_from("<III", blob, 4)
    values = np.frombuffer(blob, dtype="<f4", count=rows * cols * channels, offset=16)
    return values.astype(np.float64).reshape(rows, cols, channels)
