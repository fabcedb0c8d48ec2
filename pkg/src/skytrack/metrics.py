"""Self-contained CLEAR-MOT (MOTA) and identity (IDF1) evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tracker import hungarian, iou, iou_matrix


@dataclass
class TrajectoryEntry:
    box: np.ndarray  # (cx, cy, w, h)
    score: float | None = None
    category: int | None = None


class TrajectorySet:
    """Per-frame identity -> box collections over a contiguous frame range."""

    def __init__(self, n_frames: int):
        if n_frames < 0:
            raise ValueError(f"n_frames must be >= 0, got {n_frames}")
        self.n_frames = n_frames
        self.frames: list[dict[int, TrajectoryEntry]] = [dict() for _ in range(n_frames)]

    def add(self, frame: int, ident: int, box, score=None, category=None) -> None:
        if not 0 <= frame < self.n_frames:
            raise ValueError(f"frame {frame} outside range [0, {self.n_frames})")
        if ident in self.frames[frame]:
            raise ValueError(f"duplicate identity {ident} in frame {frame}")
        self.frames[frame][ident] = TrajectoryEntry(
            np.asarray(box, dtype=np.float64), score, category)

    def total_boxes(self) -> int:
        return sum(len(f) for f in self.frames)

    def identities(self) -> list[int]:
        seen: dict[int, None] = {}
        for frame in self.frames:
            for ident in frame:
                seen.setdefault(ident)
        return list(seen)

    def relabeled(self, mapping: dict[int, int]) -> "TrajectorySet":
        out = TrajectorySet(self.n_frames)
        for f, frame in enumerate(self.frames):
            for ident, entry in frame.items():
                out.add(f, mapping[ident], entry.box, entry.score, entry.category)
        return out


@dataclass
class MotaResult:
    mota: float
    fp: int
    fn: int
    idsw: int
    total_gt: int
    per_frame: list[tuple[int, int, int, int]] = field(repr=False, default_factory=list)


@dataclass
class Idf1Result:
    idf1: float
    idtp: int
    idfp: int
    idfn: int


def _check_ranges(gt: TrajectorySet, pred: TrajectorySet, iou_thresh: float) -> None:
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou threshold must be in (0,1), got {iou_thresh}")
    if gt.n_frames != pred.n_frames:
        raise ValueError(
            f"frame ranges differ: gt has {gt.n_frames} frames, predictions {pred.n_frames}")


def clear_mota(gt: TrajectorySet, pred: TrajectorySet, iou_thresh: float = 0.5) -> MotaResult:
    """CLEAR accuracy: MOTA = 1 - (FN + FP + IDSW) / total GT boxes.

    Matches from the previous frame are carried forward while still above the
    IoU threshold; remaining boxes are assigned per frame by Hungarian on
    1 - IoU. An identity switch is a GT identity matched to a different
    predicted identity than its previous match.
    """
    _check_ranges(gt, pred, iou_thresh)
    last_match: dict[int, int] = {}
    fp = fn = idsw = 0
    total_gt = 0
    per_frame = []
    for f in range(gt.n_frames):
        gt_frame = gt.frames[f]
        pred_frame = pred.frames[f]
        total_gt += len(gt_frame)
        matched: dict[int, int] = {}
        used_pred: set[int] = set()
        for gid, entry in gt_frame.items():
            pid = last_match.get(gid)
            if (pid is not None and pid in pred_frame and pid not in used_pred
                    and iou(entry.box, pred_frame[pid].box) >= iou_thresh):
                matched[gid] = pid
                used_pred.add(pid)
        free_gt = [gid for gid in gt_frame if gid not in matched]
        free_pred = [pid for pid in pred_frame if pid not in used_pred]
        if free_gt and free_pred:
            overlaps = iou_matrix([gt_frame[g].box for g in free_gt],
                                  [pred_frame[p].box for p in free_pred])
            pairs, _, _ = hungarian(1.0 - overlaps)
            for r, c in pairs:
                if overlaps[r, c] >= iou_thresh:
                    matched[free_gt[r]] = free_pred[c]
                    used_pred.add(free_pred[c])
        frame_fp = len(pred_frame) - len(matched)
        frame_fn = len(gt_frame) - len(matched)
        frame_idsw = 0
        for gid, pid in matched.items():
            prev = last_match.get(gid)
            if prev is not None and prev != pid:
                frame_idsw += 1
            last_match[gid] = pid
        fp += frame_fp
        fn += frame_fn
        idsw += frame_idsw
        per_frame.append((f, frame_fp, frame_fn, frame_idsw))
    mota = 1.0 - (fn + fp + idsw) / max(total_gt, 1)
    return MotaResult(mota, fp, fn, idsw, total_gt, per_frame)


def idf1(gt: TrajectorySet, pred: TrajectorySet, iou_thresh: float = 0.5) -> Idf1Result:
    """Identity F1 under the optimal global pairing of GT and predicted identities.

    Pair weight = number of frames where the two identities' boxes overlap at
    or above the threshold; the max-weight one-to-one matching gives IDTP.
    """
    _check_ranges(gt, pred, iou_thresh)
    gt_ids = gt.identities()
    pred_ids = pred.identities()
    gt_index = {g: i for i, g in enumerate(gt_ids)}
    pred_index = {p: i for i, p in enumerate(pred_ids)}
    weights = np.zeros((len(gt_ids), len(pred_ids)))
    for f in range(gt.n_frames):
        for gid, ge in gt.frames[f].items():
            for pid, pe in pred.frames[f].items():
                if iou(ge.box, pe.box) >= iou_thresh:
                    weights[gt_index[gid], pred_index[pid]] += 1
    idtp = 0
    if weights.size:
        rows, cols = linear_sum_assignment(weights, maximize=True)
        idtp = int(weights[rows, cols].sum())
    total_gt = gt.total_boxes()
    total_pred = pred.total_boxes()
    idfn = total_gt - idtp
    idfp = total_pred - idtp
    denom = 2 * idtp + idfp + idfn
    score = (2 * idtp / denom) if denom else 1.0
    return Idf1Result(score, idtp, idfp, idfn)


# ---------------------------------------------------------------------------
# trajectory file I/O


def load_trajectories_csv(path, n_frames: int | None = None) -> TrajectorySet:
    """Read gt.csv or tracker results (frame, id, left, top, w, h, ... category ...)."""
    rows = []
    max_frame = -1
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("frame"):
                continue
            parts = line.split(",")
            frame, ident = int(parts[0]), int(parts[1])
            left, top, w, h = (float(p) for p in parts[2:6])
            score = float(parts[6]) if len(parts) > 6 else None
            category = int(float(parts[7])) if len(parts) > 7 else None
            rows.append((frame, ident, (left + w / 2, top + h / 2, w, h), score, category))
            max_frame = max(max_frame, frame)
    count = n_frames if n_frames is not None else max_frame + 1
    out = TrajectorySet(count)
    for frame, ident, box, score, category in rows:
        if frame < count:
            out.add(frame, ident, box, score=score, category=category)
    return out


def write_eval_report(path, rows, header_lines=()) -> None:
    """rows: (sequence, MotaResult, Idf1Result) triples."""
    with open(path, "w", newline="") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        f.write("sequence,MOTA,IDF1,FP,FN,IDSW,IDTP,IDFP,IDFN\n")
        for name, mota, ident in rows:
            f.write(f"{name},{mota.mota:.6f},{ident.idf1:.6f},{mota.fp},{mota.fn},"
                    f"{mota.idsw},{ident.idtp},{ident.idfp},{ident.idfn}\n")
