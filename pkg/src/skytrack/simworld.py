"""Synthetic aerial-scene benchmark generator.

Ground objects with their own velocities move under a globally moving camera
(per-frame translation + rotation about the image center). The generator
emits, per frame: identity-stable box annotations, the analytic camera flow,
blur-degraded simulated detections, and rasterized feature pyramids (smooth
world texture warped by the camera, plus one Gaussian blob per object).
Everything is deterministic given the config seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .motionnet import FeaturePyramid, MotionMap, STRIDES, gt_motion_map, save_motion_map
from .tracker import Detection

SCENARIO_NAMES = ("still", "pan", "rotate", "pan+blur")


@dataclass
class BlurModel:
    """Mean detection score decays linearly with apparent speed, then saturates."""

    score_base: float = 0.95
    score_drop: float = 0.55
    v_saturate: float = 40.0
    score_min: float = 0.05
    score_noise: float = 0.05

    def __post_init__(self):
        if self.v_saturate <= 0:
            raise ValueError(f"v_saturate must be > 0, got {self.v_saturate}")


@dataclass
class SceneConfig:
    image_size: tuple[int, int] = (256, 256)  # (H, W), divisible by 32
    n_objects: int = 15
    speed_range: tuple[float, float] = (0.5, 2.5)  # own object speed, px/frame
    speed_power: float = 1.0  # >1 skews object speeds toward the low end
    size_range: tuple[float, float] = (10.0, 26.0)
    pan_speed: tuple[float, float] = (0.0, 0.0)  # camera translation px/frame
    pan_hold: int = 10  # frames before the pan direction is redrawn
    rotation_mag: float = 0.0  # rad/frame about the image center
    rotation_hold: int = 15  # frames before the spin direction flips
    box_noise: float = 0.5  # detector center jitter, px
    blur: BlurModel = field(default_factory=BlurModel)
    fp_rate: float = 0.02  # per-frame probability of one injected false positive
    spawn_rate: float = 0.5  # per-frame probability of refilling a free object slot
    drop_score: float = 0.05
    feature_channels: int = 8
    feature_noise: float = 0.08
    categories: int = 3
    min_separation: float | None = None  # derived from size_range when None
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if h % 32 or w % 32:
            raise ValueError(f"image size must be divisible by 32, got {self.image_size}")
        for name, rate in (("fp_rate", self.fp_rate), ("spawn_rate", self.spawn_rate)):
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {rate}")
        if self.n_objects < 0:
            raise ValueError(f"n_objects must be >= 0, got {self.n_objects}")
        if self.min_separation is None:
            # keep every object's stride-8 center cell clear of other boxes, so
            # the ground-truth motion map stays exact at each object's center
            self.min_separation = 4.0 * np.sqrt(2.0) + max(self.size_range) / np.sqrt(2.0) + 1.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneConfig":
        raw = json.loads(text)
        raw["blur"] = BlurModel(**raw["blur"])
        for key in ("image_size", "speed_range", "size_range", "pan_speed"):
            raw[key] = tuple(raw[key])
        return cls(**raw)


@dataclass
class Affine:
    """p -> matrix @ p + offset, with points as (x, y)."""

    matrix: np.ndarray
    offset: np.ndarray

    @classmethod
    def identity(cls) -> "Affine":
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def camera_step(cls, tx: float, ty: float, theta: float, center) -> "Affine":
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([[c, -s], [s, c]])
        center = np.asarray(center, dtype=np.float64)
        return cls(rot, center - rot @ center + np.array([tx, ty]))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix.T + self.offset

    def compose(self, inner: "Affine") -> "Affine":
        return Affine(self.matrix @ inner.matrix, self.matrix @ inner.offset + self.offset)

    def inverse(self) -> "Affine":
        inv = np.linalg.inv(self.matrix)
        return Affine(inv, -inv @ self.offset)

    def flow(self, points: np.ndarray) -> np.ndarray:
        return self.apply(points) - np.asarray(points, dtype=np.float64)


@dataclass
class Annotation:
    ident: int
    cx: float
    cy: float
    w: float
    h: float
    category: int

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


class SequenceData:
    """One generated sequence: annotations, camera affines, detections, pyramids."""

    def __init__(self, config: SceneConfig, n_frames: int,
                 annotations: list[list[Annotation]], step_affines: list[Affine],
                 detections: list[list[Detection]], pyramids: list[FeaturePyramid]):
        self.config = config
        self.n_frames = n_frames
        self.annotations = annotations
        self.step_affines = step_affines
        self.detections = detections
        self.pyramids = pyramids
        self._index = [{ann.ident: ann for ann in frame} for frame in annotations]

    def annotation_boxes(self, frame: int) -> dict[int, tuple[float, float, float, float]]:
        return {ident: ann.box for ident, ann in self._index[frame].items()}

    def camera_flow_at(self, frame: int, points) -> np.ndarray:
        """Analytic flow between frames `frame` and `frame + 1` at given (x, y) points."""
        return self.step_affines[frame].flow(points)

    def flow_field(self, frame: int) -> np.ndarray:
        """Dense flow sampled at pixel centers; shape (H, W, 2), channels (dx, dy)."""
        h, w = self.config.image_size
        xs, ys = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
        pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
        return self.step_affines[frame].flow(pts).reshape(h, w, 2)

    def apparent_speed(self, frame: int, ident: int) -> float:
        """Center displacement magnitude into `frame` (first frame looks ahead)."""
        here = self._index[frame].get(ident)
        if here is None:
            raise KeyError(f"identity {ident} not present in frame {frame}")
        prev = self._index[frame - 1].get(ident) if frame > 0 else None
        if prev is not None:
            return float(np.hypot(here.cx - prev.cx, here.cy - prev.cy))
        nxt = self._index[frame + 1].get(ident) if frame + 1 < self.n_frames else None
        if nxt is not None:
            return float(np.hypot(nxt.cx - here.cx, nxt.cy - here.cy))
        return 0.0

    def gt_motion_maps(self) -> list[MotionMap]:
        h, w = self.config.image_size
        out = []
        for t in range(self.n_frames - 1):
            out.append(gt_motion_map(self.annotation_boxes(t), self.annotation_boxes(t + 1),
                                     self.flow_field(t), (h // 8, w // 8)))
        return out

    def gt_trajectories(self):
        from .metrics import TrajectorySet

        out = TrajectorySet(self.n_frames)
        for f, frame in enumerate(self.annotations):
            for ann in frame:
                out.add(f, ann.ident, (ann.cx, ann.cy, ann.w, ann.h),
                        score=1.0, category=ann.category)
        return out

    def perfect_detections(self) -> list[list[Detection]]:
        return [
            [Detection(a.cx, a.cy, a.w, a.h, 1.0, a.category,
                       velocity=self.apparent_speed(f, a.ident), source_id=a.ident)
             for a in frame]
            for f, frame in enumerate(self.annotations)
        ]


# ---------------------------------------------------------------------------
# camera and object kinematics


def camera_schedule(config: SceneConfig, n_frames: int, rng: np.random.Generator):
    """Per-step (tx, ty, theta); pan segments pull back toward the start point."""
    steps = []
    drift = np.zeros(2)
    pan_vel = np.zeros(2)
    spin = 0.0
    for f in range(n_frames - 1):
        if f % max(1, config.pan_hold) == 0:
            speed = rng.uniform(*config.pan_speed)
            angle = rng.uniform(0.0, 2.0 * np.pi)
            direction = np.array([np.cos(angle), np.sin(angle)])
            if np.linalg.norm(drift) > 1e-9:
                pull = -drift / np.linalg.norm(drift)
                direction = 0.8 * pull + 0.7 * direction
                direction /= np.linalg.norm(direction)
            pan_vel = direction * speed
        if f % max(1, config.rotation_hold) == 0:
            spin = config.rotation_mag * (1.0 if rng.random() < 0.5 else -1.0)
        drift = drift + pan_vel
        steps.append((float(pan_vel[0]), float(pan_vel[1]), float(spin)))
    return steps


def _camera_reach(config: SceneConfig) -> float:
    # largest one-step displacement the camera can induce anywhere in frame
    h, w = config.image_size
    return config.pan_speed[1] + config.rotation_mag * float(np.hypot(h, w)) / 2.0


def _spawn_object(config: SceneConfig, rng: np.random.Generator, ident: int,
                  others: list[dict], ghost_positions=()) -> dict | None:
    """New object with clearance from live objects and last-frame positions.

    Ghost clearance keeps newcomers away from spots where a just-departed
    object's predicted box would sit, so trackers cannot adopt them by accident.
    """
    h, w = config.image_size
    lo, hi = config.speed_range
    speed = lo + (hi - lo) * rng.random() ** config.speed_power
    angle = rng.uniform(0.0, 2.0 * np.pi)
    ghost_clear = config.min_separation + _camera_reach(config) + 2.0
    pos = None
    for _ in range(20):  # rejection sampling against the separation rules
        candidate = np.array([rng.uniform(0.08 * w, 0.92 * w),
                              rng.uniform(0.08 * h, 0.92 * h)])
        if not all(np.linalg.norm(candidate - o["pos"]) >= config.min_separation
                   for o in others):
            continue
        if not all(np.linalg.norm(candidate - g) >= ghost_clear
                   for g in ghost_positions):
            continue
        pos = candidate
        break
    if pos is None:
        return None
    return {
        "ident": ident,
        "pos": pos,
        "vel": speed * np.array([np.cos(angle), np.sin(angle)]),
        "size": (rng.uniform(*config.size_range), rng.uniform(*config.size_range)),
        "category": int(rng.integers(config.categories)),
    }


def generate_sequence(config: SceneConfig, n_frames: int) -> SequenceData:
    """Simulate a full sequence; deterministic for a given config (incl. seed)."""
    if n_frames < 2:
        raise ValueError(f"need at least 2 frames, got {n_frames}")
    h, w = config.image_size
    rng = np.random.default_rng(config.seed)
    steps = camera_schedule(config, n_frames, rng)
    center = np.array([w / 2.0, h / 2.0])
    step_affines = [Affine.camera_step(tx, ty, th, center) for tx, ty, th in steps]

    objects: list[dict] = []
    for i in range(config.n_objects):
        candidate = _spawn_object(config, rng, len(objects) + 1, objects)
        if candidate is not None:
            objects.append(candidate)
    next_ident = len(objects) + 1
    annotations: list[list[Annotation]] = []
    for f in range(n_frames):
        frame = [Annotation(o["ident"], o["pos"][0], o["pos"][1],
                            o["size"][0], o["size"][1], o["category"]) for o in objects]
        annotations.append(frame)
        if f == n_frames - 1:
            break
        prev_positions = [o["pos"].copy() for o in objects]
        survivors = []
        for o in objects:
            pos = step_affines[f].apply(o["pos"]) + o["vel"]
            if not (0.0 <= pos[0] < w and 0.0 <= pos[1] < h):
                continue
            # objects converging below the separation rule merge visually;
            # the newer one is dropped (mirrors occlusion without modeling it)
            if any(np.linalg.norm(pos - s["pos"]) < config.min_separation
                   for s in survivors):
                continue
            o["pos"] = pos
            survivors.append(o)
        objects = survivors
        while len(objects) < config.n_objects and rng.random() < config.spawn_rate:
            candidate = _spawn_object(config, rng, next_ident, objects, prev_positions)
            if candidate is None:
                break
            objects.append(candidate)
            next_ident += 1

    detections = detector_sim(annotations, config)
    cum = [Affine.identity()]
    for aff in step_affines:
        cum.append(aff.compose(cum[-1]))
    pyramids = rasterize_features(annotations, cum[:n_frames], config)
    return SequenceData(config, n_frames, annotations, step_affines, detections, pyramids)


# ---------------------------------------------------------------------------
# simulated detector


def blur_score(speed: float, config: SceneConfig) -> float:
    """Mean detection score at a given apparent speed (pixels/frame)."""
    if speed < 0:
        raise ValueError(f"speed must be >= 0, got {speed}")
    blur = config.blur
    mean = blur.score_base - blur.score_drop * min(speed, blur.v_saturate) / blur.v_saturate
    return float(np.clip(mean, blur.score_min, 1.0))


def detector_sim(annotations: list[list[Annotation]], config: SceneConfig) -> list[list[Detection]]:
    """Jittered, blur-scored detections with occasional false positives.

    Apparent speeds are derived from consecutive-frame identity positions.
    Detections scoring below the drop threshold are discarded.
    """
    h, w = config.image_size
    rng = np.random.default_rng([config.seed, 4001])
    index = [{a.ident: a for a in frame} for frame in annotations]
    out: list[list[Detection]] = []
    for f, frame in enumerate(annotations):
        dets: list[Detection] = []
        for ann in frame:
            prev = index[f - 1].get(ann.ident) if f > 0 else None
            if prev is None and f + 1 < len(annotations):
                prev = index[f + 1].get(ann.ident)
                ref = (ann.cx, ann.cy)
                speed = float(np.hypot(prev.cx - ref[0], prev.cy - ref[1])) if prev else 0.0
            elif prev is not None:
                speed = float(np.hypot(ann.cx - prev.cx, ann.cy - prev.cy))
            else:
                speed = 0.0
            jitter = rng.normal(0.0, config.box_noise, size=2) if config.box_noise > 0 else (0.0, 0.0)
            score = blur_score(speed, config)
            if config.blur.score_noise > 0:
                score = float(np.clip(score + rng.normal(0.0, config.blur.score_noise), 0.0, 1.0))
            if score < config.drop_score:
                continue
            dets.append(Detection(ann.cx + jitter[0], ann.cy + jitter[1], ann.w, ann.h,
                                  score, ann.category, velocity=speed, source_id=ann.ident))
        if rng.random() < config.fp_rate:
            fw = rng.uniform(*config.size_range)
            fh = rng.uniform(*config.size_range)
            dets.append(Detection(rng.uniform(0, w), rng.uniform(0, h), fw, fh,
                                  rng.uniform(0.1, 0.7), int(rng.integers(config.categories)),
                                  velocity=None, source_id=None))
        out.append(dets)
    return out


# ---------------------------------------------------------------------------
# feature rasterization


def _periodic_bilinear(canvas: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample (C, Hc, Wc) canvas at world coords with wrap-around; returns (C, n)."""
    hc, wc = canvas.shape[1:]
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(int) % wc
    y0 = y0.astype(int) % hc
    x1 = (x0 + 1) % wc
    y1 = (y0 + 1) % hc
    top = canvas[:, y0, x0] * (1 - fx) + canvas[:, y0, x1] * fx
    bot = canvas[:, y1, x0] * (1 - fx) + canvas[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _level_textures(config: SceneConfig) -> list[np.ndarray]:
    h, w = config.image_size
    textures = []
    for li, stride in enumerate(STRIDES):
        rng = np.random.default_rng([config.seed, 1001, li])
        noise = rng.normal(size=(config.feature_channels, h, w))
        smooth = gaussian_filter(noise, sigma=(0, 0.6 * stride, 0.6 * stride), mode="wrap")
        mean = smooth.mean(axis=(1, 2), keepdims=True)
        std = smooth.std(axis=(1, 2), keepdims=True)
        smooth = (smooth - mean) / np.maximum(std, 1e-9)
        # normalized pixel vectors (x2 gain): self-similarity wins exactly
        # under integer shifts, so correlation peaks identify motion cleanly
        norms = np.linalg.norm(smooth, axis=0, keepdims=True)
        textures.append(2.0 * smooth / np.maximum(norms, 1e-9))
    return textures


def _blob_amplitudes(config: SceneConfig, ident: int) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 2001, ident])
    amps = rng.uniform(0.8, 1.8, size=config.feature_channels)
    signs = rng.choice([-1.0, 1.0], size=config.feature_channels)
    return amps * signs


def rasterize_features(annotations: list[list[Annotation]], cum_affines: list[Affine],
                       config: SceneConfig) -> list[FeaturePyramid]:
    """Per-frame pyramids: warped world texture + per-object Gaussian blobs + noise.

    cum_affines[f] maps frame-0 (world) coordinates into frame f, so the
    texture is sampled at its inverse and moves exactly with the camera.
    """
    h, w = config.image_size
    textures = _level_textures(config)
    amp_cache: dict[int, np.ndarray] = {}
    pyramids = []
    for f, frame in enumerate(annotations):
        inverse = cum_affines[f].inverse()
        levels = []
        for li, stride in enumerate(STRIDES):
            lh, lw = h // stride, w // stride
            cols, rows = np.meshgrid(np.arange(lw), np.arange(lh))
            pix = np.stack([(cols.ravel() + 0.5) * stride, (rows.ravel() + 0.5) * stride], axis=1)
            world = inverse.apply(pix)
            level = _periodic_bilinear(textures[li], world[:, 0], world[:, 1])
            level = level.reshape(config.feature_channels, lh, lw).copy()
            for ann in frame:
                amps = amp_cache.setdefault(ann.ident, _blob_amplitudes(config, ann.ident))
                ccol = ann.cx / stride - 0.5
                crow = ann.cy / stride - 0.5
                sigma = max(0.6, 0.35 * (ann.w + ann.h) / 2.0 / stride)
                reach = int(np.ceil(3 * sigma)) + 1
                r0, r1 = max(0, int(crow) - reach), min(lh, int(crow) + reach + 1)
                c0, c1 = max(0, int(ccol) - reach), min(lw, int(ccol) + reach + 1)
                if r0 >= r1 or c0 >= c1:
                    continue
                rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
                bump = np.exp(-((rr - crow) ** 2 + (cc - ccol) ** 2) / (2.0 * sigma * sigma))
                level[:, r0:r1, c0:c1] += amps[:, None, None] * bump[None]
            if config.feature_noise > 0:
                rng = np.random.default_rng([config.seed, 3001, f, li])
                level += rng.normal(0.0, config.feature_noise, size=level.shape)
            levels.append(level)
        pyramids.append(FeaturePyramid(tuple(levels)))
    return pyramids


# ---------------------------------------------------------------------------
# named scenarios


def scenario_config(name: str, seed: int = 0, image_size=(256, 256),
                    n_objects: int = 15) -> SceneConfig:
    """Benchmark presets; camera aggressiveness and blur vary per scenario."""
    base = dict(image_size=tuple(image_size), n_objects=n_objects, seed=seed)
    if name == "still":
        return SceneConfig(**base)
    if name == "pan":
        return SceneConfig(pan_speed=(6.0, 12.0), pan_hold=10, **base)
    if name == "rotate":
        return SceneConfig(pan_speed=(6.0, 10.0), pan_hold=10,
                           rotation_mag=0.02, rotation_hold=15, **base)
    if name == "pan+blur":
        return SceneConfig(pan_speed=(0.0, 12.0), pan_hold=8,
                           speed_range=(0.0, 44.0), speed_power=1.8,
                           blur=BlurModel(score_drop=0.80), fp_rate=0.03, **base)
    raise ValueError(f"unknown scenario {name!r}; valid names: {', '.join(SCENARIO_NAMES)}")


def make_dataset(scenario: str, n_sequences: int, n_frames: int, seed: int = 0,
                 image_size=(256, 256), n_objects: int = 15) -> list[SequenceData]:
    out = []
    for i in range(n_sequences):
        cfg = scenario_config(scenario, seed=seed * 1_000_003 + i,
                              image_size=image_size, n_objects=n_objects)
        out.append(generate_sequence(cfg, n_frames))
    return out


# ---------------------------------------------------------------------------
# dataset directory layout


def save_sequence(dirpath, seq: SequenceData, scenario: str | None = None,
                  header_lines=()) -> None:
    """Write gt.csv, det.csv, flow/NNNN.bin and the config snapshot."""
    import os

    os.makedirs(dirpath, exist_ok=True)
    flow_dir = os.path.join(dirpath, "flow")
    os.makedirs(flow_dir, exist_ok=True)
    with open(os.path.join(dirpath, "gt.csv"), "w", newline="") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        f.write("frame,id,bb_left,bb_top,bb_width,bb_height,conf,category,visibility\n")
        for frame, anns in enumerate(seq.annotations):
            for a in anns:
                f.write(f"{frame},{a.ident},{a.cx - a.w / 2:.4f},{a.cy - a.h / 2:.4f},"
                        f"{a.w:.4f},{a.h:.4f},1,{a.category},1\n")
    with open(os.path.join(dirpath, "det.csv"), "w", newline="") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        f.write("frame,bb_left,bb_top,bb_width,bb_height,score,category,visibility\n")
        for frame, dets in enumerate(seq.detections):
            for d in dets:
                f.write(f"{frame},{d.cx - d.w / 2:.4f},{d.cy - d.h / 2:.4f},"
                        f"{d.w:.4f},{d.h:.4f},{d.score:.6f},{d.category},1\n")
    for t in range(seq.n_frames - 1):
        save_motion_map(os.path.join(flow_dir, f"{t:04d}.bin"), seq.flow_field(t))
    snapshot = {"scenario": scenario, "n_frames": seq.n_frames,
                "config": json.loads(seq.config.to_json())}
    with open(os.path.join(dirpath, "config.json"), "w") as f:
        json.dump(snapshot, f, indent=1, sort_keys=True)
        f.write("\n")


def load_sequence(dirpath) -> SequenceData:
    """Re-generate a saved sequence from its config snapshot (exact, by seed)."""
    import os

    with open(os.path.join(dirpath, "config.json")) as f:
        snapshot = json.load(f)
    config = SceneConfig.from_json(json.dumps(snapshot["config"]))
    return generate_sequence(config, snapshot["n_frames"])
