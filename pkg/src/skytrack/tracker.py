"""Online predict-and-associate tracking.

Tracks are predicted one frame ahead by a chosen motion model (learned
motion map, constant-velocity Kalman filter, or the identity), then matched
to detections in two score-partitioned stages with Hungarian assignment on
1 - IoU. Boxes are (cx, cy, w, h) in pixels throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .motionnet import MotionMap

MOTION_MODELS = ("mmap", "kalman", "zero")

TENTATIVE = "tentative"
ACTIVE = "active"
LOST = "lost"


@dataclass
class Detection:
    cx: float
    cy: float
    w: float
    h: float
    score: float
    category: int = 0
    # simulator provenance, ignored by the tracker itself
    velocity: float | None = None
    source_id: int | None = None

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"detection box must have positive size, got w={self.w}, h={self.h}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must be in [0,1], got {self.score}")

    @property
    def box(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def iou(box_a, box_b) -> float:
    """Intersection over union of two (cx, cy, w, h) boxes."""
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    a_l, a_r, a_t, a_b = ax - aw / 2, ax + aw / 2, ay - ah / 2, ay + ah / 2
    b_l, b_r, b_t, b_b = bx - bw / 2, bx + bw / 2, by - bh / 2, by + bh / 2
    inter_w = min(a_r, b_r) - max(a_l, b_l)
    inter_h = min(a_b, b_b) - max(a_t, b_t)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    # areas from the same corner differences keep iou(a, a) exactly 1
    union = (a_r - a_l) * (a_b - a_t) + (b_r - b_l) * (b_b - b_t) - inter
    return inter / union


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou(a, b)
    return out


def hungarian(cost) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Minimum-cost one-to-one assignment; returns (pairs, free rows, free cols)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {cost.shape}")
    if cost.size and not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    if cost.size == 0:
        return [], list(range(cost.shape[0])), list(range(cost.shape[1]))
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    matched_rows = {r for r, _ in pairs}
    matched_cols = {c for _, c in pairs}
    free_rows = [i for i in range(cost.shape[0]) if i not in matched_rows]
    free_cols = [j for j in range(cost.shape[1]) if j not in matched_cols]
    return pairs, free_rows, free_cols


# ---------------------------------------------------------------------------
# constant-velocity Kalman filter on (cx, cy, area, aspect)


class KalmanBoxFilter:
    """SORT-style constant-velocity filter; state (cx, cy, s, r, vcx, vcy, vs)."""

    def __init__(self, box):
        cx, cy, w, h = box
        self.transition = np.eye(7)
        for i in range(3):
            self.transition[i, i + 4] = 1.0
        self.observation = np.eye(4, 7)
        self.process_noise = np.diag([1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 1e-4])
        self.obs_noise = np.diag([1.0, 1.0, 10.0, 10.0])
        self.mean = np.zeros(7)
        self.mean[:4] = (cx, cy, w * h, w / h)
        self.cov = np.diag([10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4])

    def predict(self) -> np.ndarray:
        if self.mean[2] + self.mean[6] <= 0:
            self.mean[6] = 0.0
        self.mean = self.transition @ self.mean
        self.cov = self.transition @ self.cov @ self.transition.T + self.process_noise
        return self.box()

    def update(self, box) -> None:
        cx, cy, w, h = box
        z = np.array([cx, cy, w * h, w / h])
        innovation = z - self.observation @ self.mean
        s = self.observation @ self.cov @ self.observation.T + self.obs_noise
        gain = self.cov @ self.observation.T @ np.linalg.inv(s)
        self.mean = self.mean + gain @ innovation
        self.cov = (np.eye(7) - gain @ self.observation) @ self.cov

    def box(self) -> np.ndarray:
        cx, cy, area, aspect = self.mean[:4]
        area = max(area, 1e-6)
        aspect = max(aspect, 1e-6)
        w = np.sqrt(area * aspect)
        return np.array([cx, cy, w, area / w])


@dataclass
class TrackerConfig:
    score_high: float = 0.6
    score_low: float = 0.1
    iou_gate: float = 0.3
    max_age: int = 30
    min_hits: int = 2
    predict_while_lost: bool = True

    def __post_init__(self):
        if not 0.0 <= self.score_low < self.score_high <= 1.0:
            raise ValueError(
                f"need 0 <= score_low < score_high <= 1, got {self.score_low}/{self.score_high}")
        if not 0.0 < self.iou_gate < 1.0:
            raise ValueError(f"iou_gate must be in (0,1), got {self.iou_gate}")


@dataclass
class Track:
    track_id: int
    box: np.ndarray  # (cx, cy, w, h)
    category: int
    score: float
    status: str = TENTATIVE
    age_since_update: int = 0
    hit_count: int = 1
    kalman: KalmanBoxFilter | None = None


def sample_motion(motion_map, center) -> tuple[float, float]:
    """Displacement at the stride cell containing a pixel center, clamped to the grid."""
    if isinstance(motion_map, MotionMap):
        values, stride = motion_map.values, motion_map.stride
    else:
        values, stride = np.asarray(motion_map), 8
    cx, cy = center
    row = min(max(int(np.floor(cy / stride)), 0), values.shape[0] - 1)
    col = min(max(int(np.floor(cx / stride)), 0), values.shape[1] - 1)
    return float(values[row, col, 0]), float(values[row, col, 1])


def predict_step(tracks: list[Track], motion_model: str, motion_map=None,
                 predict_while_lost: bool = True) -> list[np.ndarray]:
    """Advance every track one frame; returns the predicted boxes."""
    if motion_model not in MOTION_MODELS:
        raise ValueError(f"unknown motion model {motion_model!r}; expected one of {MOTION_MODELS}")
    predicted = []
    for track in tracks:
        if track.status == LOST and not predict_while_lost:
            predicted.append(track.box.copy())
            continue
        if motion_model == "zero":
            box = track.box.copy()
        elif motion_model == "kalman":
            box = track.kalman.predict()
        else:
            dx, dy = sample_motion(motion_map, (track.box[0], track.box[1]))
            box = track.box.copy()
            box[0] += dx
            box[1] += dy
        track.box = box
        predicted.append(box)
    return predicted


def associate_two_stage(predicted_boxes, detections, config: TrackerConfig):
    """Score-partitioned matching.

    Stage 1 pairs tracks with high-score detections, stage 2 pairs the
    leftover tracks with low-score detections; both stages gate at
    IoU >= iou_gate. Returns (matches, new-track detection indices,
    unmatched track indices). Unmatched low-score detections are dropped.
    """
    high = [i for i, d in enumerate(detections) if d.score >= config.score_high]
    low = [i for i, d in enumerate(detections)
           if config.score_low <= d.score < config.score_high]
    track_pool = list(range(len(predicted_boxes)))
    matches: list[tuple[int, int]] = []

    def run_stage(track_idx, det_idx):
        if not track_idx or not det_idx:
            return track_idx, det_idx
        overlaps = iou_matrix([predicted_boxes[t] for t in track_idx],
                              [detections[d].box for d in det_idx])
        pairs, free_t, free_d = hungarian(1.0 - overlaps)
        leftover_t = [track_idx[i] for i in free_t]
        leftover_d = [det_idx[j] for j in free_d]
        for r, c in pairs:
            if overlaps[r, c] >= config.iou_gate:
                matches.append((track_idx[r], det_idx[c]))
            else:
                leftover_t.append(track_idx[r])
                leftover_d.append(det_idx[c])
        return sorted(leftover_t), sorted(leftover_d)

    track_pool, unmatched_high = run_stage(track_pool, high)
    track_pool, _ = run_stage(track_pool, low)
    return matches, unmatched_high, track_pool


class MotionTracker:
    """Frame-serial tracker with track lifecycle management."""

    def __init__(self, config: TrackerConfig | None = None, motion_model: str = "kalman"):
        if motion_model not in MOTION_MODELS:
            raise ValueError(f"unknown motion model {motion_model!r}; expected one of {MOTION_MODELS}")
        self.config = config or TrackerConfig()
        self.motion_model = motion_model
        self.tracks: list[Track] = []
        self._next_id = 1

    def _new_track(self, det: Detection) -> Track:
        track = Track(
            track_id=self._next_id,
            box=det.box,
            category=det.category,
            score=det.score,
            status=ACTIVE if self.config.min_hits <= 1 else TENTATIVE,
        )
        self._next_id += 1
        if self.motion_model == "kalman":
            track.kalman = KalmanBoxFilter(det.box)
        return track

    def step(self, detections: list[Detection], motion_map=None) -> list[Track]:
        """Process one frame; returns the currently active tracks."""
        if self.motion_model == "mmap" and motion_map is None and self.tracks:
            raise ValueError("motion-map model requires a motion map for every frame")
        predicted = predict_step(self.tracks, self.motion_model, motion_map,
                                 self.config.predict_while_lost)
        matches, fresh, unmatched = associate_two_stage(predicted, detections, self.config)

        for t_idx, d_idx in matches:
            track, det = self.tracks[t_idx], detections[d_idx]
            track.box = det.box
            track.score = det.score
            track.hit_count += 1
            track.age_since_update = 0
            track.status = ACTIVE if track.hit_count >= self.config.min_hits else TENTATIVE
            if track.kalman is not None:
                track.kalman.update(det.box)

        survivors = [self.tracks[i] for i, _ in enumerate(self.tracks)
                     if i in {t for t, _ in matches}]
        for t_idx in unmatched:
            track = self.tracks[t_idx]
            track.age_since_update += 1
            if track.status == TENTATIVE or track.age_since_update > self.config.max_age:
                continue  # dropped
            track.status = LOST
            survivors.append(track)

        for d_idx in fresh:
            survivors.append(self._new_track(detections[d_idx]))

        # preserve creation order for reproducible association costs
        survivors.sort(key=lambda tr: tr.track_id)
        self.tracks = survivors
        return [t for t in self.tracks if t.status == ACTIVE]


def track_sequence(frame_detections, motion_model: str, config: TrackerConfig | None = None,
                   motion_maps=None):
    """Track a full sequence; returns a TrajectorySet of active tracks per frame.

    motion_maps[t] must give the displacement map between frames t and t+1
    when motion_model is "mmap".
    """
    from .metrics import TrajectorySet  # import here to avoid a module cycle

    frame_detections = list(frame_detections)
    n_frames = len(frame_detections)
    if motion_model == "mmap":
        if motion_maps is None or len(motion_maps) < n_frames - 1:
            have = 0 if motion_maps is None else len(motion_maps)
            raise ValueError(
                f"motion-map model needs {n_frames - 1} per-pair maps, got {have}")
    tracker = MotionTracker(config, motion_model)
    result = TrajectorySet(n_frames)
    for f, detections in enumerate(frame_detections):
        motion_map = None
        if motion_model == "mmap" and f >= 1:
            motion_map = motion_maps[f - 1]
        for track in tracker.step(detections, motion_map):
            result.add(f, track.track_id, track.box, score=track.score,
                       category=track.category)
    return result


# ---------------------------------------------------------------------------
# detection file I/O


def write_results_csv(path, trajectories, header_lines=()) -> None:
    """One line per active track per frame: frame, id, left, top, w, h, score, category."""
    with open(path, "w", newline="") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        f.write("frame,id,bb_left,bb_top,bb_width,bb_height,score,category\n")
        for frame in range(trajectories.n_frames):
            for tid, entry in trajectories.frames[frame].items():
                cx, cy, w, h = entry.box
                score = 1.0 if entry.score is None else entry.score
                cat = 0 if entry.category is None else entry.category
                f.write(f"{frame},{tid},{cx - w / 2:.4f},{cy - h / 2:.4f},"
                        f"{w:.4f},{h:.4f},{score:.6f},{cat}\n")


def load_detections_csv(path, n_frames: int | None = None) -> list[list[Detection]]:
    """Read a det.csv written by the scene generator back into per-frame lists."""
    rows = []
    max_frame = -1
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("frame"):
                continue
            parts = line.split(",")
            frame = int(parts[0])
            left, top, w, h, score = (float(p) for p in parts[1:6])
            category = int(parts[6]) if len(parts) > 6 else 0
            rows.append((frame, Detection(left + w / 2, top + h / 2, w, h,
                                          min(max(score, 0.0), 1.0), category)))
            max_frame = max(max_frame, frame)
    count = n_frames if n_frames is not None else max_frame + 1
    frames: list[list[Detection]] = [[] for _ in range(count)]
    for frame, det in rows:
        if frame < count:
            frames[frame].append(det)
    return frames
