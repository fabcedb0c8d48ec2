"""Benchmark orchestration: ablation grids and detection re-scoring runs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import marginloss, metrics, simworld, tracker
from .motionnet import MotionNet, MotionNetConfig, MotionMap, motion_l1_loss, train_motion
from .tensor import SgdConfig
from .tracker import Detection, TrackerConfig

MOTION_VARIANTS = ("zero", "kalman", "local", "local+v", "local+h", "full")
_SCAN_MODE = {"local": "none", "local+v": "vertical", "local+h": "horizontal", "full": "both"}


@dataclass
class TrainSettings:
    """Recipe for fitting the motion net inside experiment runs."""

    learning_rate: float = 0.005
    batch_size: int = 2
    epochs: int = 4
    pair_stride: int = 2
    width: int = 32
    state_size: int = 8
    radius: int = 3
    blocks_per_level: int = 1

    def net_config(self, scan_mode: str = "both") -> MotionNetConfig:
        return MotionNetConfig(correlation_radius=self.radius, width=self.width,
                               state_size=self.state_size,
                               blocks_per_level=self.blocks_per_level, scan_mode=scan_mode)

    def sgd(self) -> SgdConfig:
        return SgdConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                         epochs=self.epochs)


def fit_motion_net(train_seqs, settings: TrainSettings, scan_mode: str = "both",
                   seed: int = 0):
    net = MotionNet(settings.net_config(scan_mode),
                    in_channels=train_seqs[0].config.feature_channels, seed=seed)
    curve = train_motion(train_seqs, net, settings.sgd(), seed=seed,
                         pair_stride=settings.pair_stride)
    return net, curve


def predicted_maps(net: MotionNet, seq) -> list[MotionMap]:
    return [net.predict(seq.pyramids[t], seq.pyramids[t + 1])
            for t in range(seq.n_frames - 1)]


def heldout_l1(net: MotionNet, seqs, frame_stride: int = 4) -> float:
    """Mean displacement-map L1 against ground truth on held-out pairs."""
    errs = []
    for seq in seqs:
        maps = seq.gt_motion_maps()
        for t in range(0, seq.n_frames - 1, frame_stride):
            pred = net.forward(seq.pyramids[t], seq.pyramids[t + 1])
            errs.append(motion_l1_loss(pred, maps[t]).item())
    return float(np.mean(errs))


def evaluate_tracking(seq, detections, motion_variant: str, config: TrackerConfig,
                      maps=None) -> tuple[metrics.MotaResult, metrics.Idf1Result]:
    model = {"zero": "zero", "kalman": "kalman"}.get(motion_variant, "mmap")
    traj = tracker.track_sequence(detections, model, config, maps)
    gt = seq.gt_trajectories()
    return metrics.clear_mota(gt, traj), metrics.idf1(gt, traj)


# ---------------------------------------------------------------------------
# detection re-scoring with a trained score head


def velocity_samples(seqs, negatives_per_positive: float = 1.0,
                     seed: int = 0) -> np.ndarray:
    """(velocity, label) pairs from simulated detections; clutter fills label 0."""
    rows = []
    for seq in seqs:
        for dets in seq.detections:
            for det in dets:
                if det.source_id is not None and det.velocity is not None:
                    rows.append((det.velocity, 1.0))
                else:
                    rows.append((0.0, 0.0))
    n_pos = sum(1 for _, label in rows if label == 1.0)
    n_neg = sum(1 for _, label in rows if label == 0.0)
    need = int(n_pos * negatives_per_positive) - n_neg
    rng = np.random.default_rng(seed)
    for _ in range(max(0, need)):
        rows.append((0.0, 0.0))
        rng.random()
    return np.asarray(rows)


def rescore_detections(frame_detections, head: marginloss.ScoreHead,
                       seed: int = 0, threshold: float = 0.5):
    """Replace simulator scores with head scores; drop detections below threshold.

    Evidence features are synthesized from each detection's true provenance
    (object velocity vs clutter), matching the head's training distribution.
    """
    rng = np.random.default_rng([seed, 7001])
    out = []
    for dets in frame_detections:
        kept = []
        for det in dets:
            is_object = det.source_id is not None and det.velocity is not None
            velocity = det.velocity if is_object else 0.0
            feats = marginloss.object_evidence(
                np.array([velocity]), np.array([1 if is_object else 0]), rng)
            score = float(np.clip(head.scores(feats)[0], 0.0, 1.0))
            if score < threshold:
                continue
            kept.append(Detection(det.cx, det.cy, det.w, det.h, score, det.category,
                                  velocity=det.velocity, source_id=det.source_id))
        out.append(kept)
    return out


def detection_filter_comparison(train_seqs, test_seqs, margin_config=None,
                                seed: int = 0, threshold: float = 0.5,
                                tracker_config: TrackerConfig | None = None,
                                head_epochs: int = 400) -> dict[str, tuple[float, float]]:
    """Track the same scenes with CE- vs margin-trained score filtering.

    Returns {loss_name: (mean MOTA, mean IDF1)} over the test sequences with
    the Kalman motion model, isolating the detection-scoring effect.
    """
    margin_config = margin_config or marginloss.MarginConfig()
    tracker_config = tracker_config or TrackerConfig(min_hits=1)
    samples = velocity_samples(train_seqs, seed=seed)
    out = {}
    for loss_name in ("ce", "mmloss"):
        result = marginloss.score_head_experiment(
            samples, loss_name, margin_config, seed=seed, epochs=head_epochs)
        motas, idf1s = [], []
        for seq in test_seqs:
            dets = rescore_detections(seq.detections, result.head, seed=seed,
                                      threshold=threshold)
            mota, idf = evaluate_tracking(seq, dets, "kalman", tracker_config)
            motas.append(mota.mota)
            idf1s.append(idf.idf1)
        out[loss_name] = (float(np.mean(motas)), float(np.mean(idf1s)))
    return out


# ---------------------------------------------------------------------------
# full ablation grid


@dataclass
class AblationRow:
    motion: str
    loss: str
    mota: float
    idf1: float


def run_ablation(scenario: str = "rotate", seed: int = 0, train_sequences: int = 4,
                 test_sequences: int = 2, n_frames: int = 50, image_size=(128, 128),
                 n_objects: int = 10, settings: TrainSettings | None = None,
                 tracker_config: TrackerConfig | None = None,
                 head_epochs: int = 400) -> list[AblationRow]:
    """Motion-variant x loss grid of MOTA/IDF1 on held-out sequences.

    The loss dimension controls how detections are re-scored and filtered
    before tracking; the motion dimension picks the prediction model, with
    the learned variants trained per scan mode.
    """
    settings = settings or TrainSettings()
    tracker_config = tracker_config or TrackerConfig(min_hits=1)
    train_seqs = simworld.make_dataset(scenario, train_sequences, n_frames, seed=seed,
                                       image_size=image_size, n_objects=n_objects)
    test_seqs = simworld.make_dataset(scenario, test_sequences, n_frames, seed=seed + 500,
                                      image_size=image_size, n_objects=n_objects)
    nets = {}
    for variant in MOTION_VARIANTS:
        if variant in _SCAN_MODE:
            nets[variant], _ = fit_motion_net(train_seqs, settings,
                                              _SCAN_MODE[variant], seed=seed)
    samples = velocity_samples(train_seqs, seed=seed)
    rows: list[AblationRow] = []
    for loss_name in ("ce", "mmloss"):
        result = marginloss.score_head_experiment(samples, loss_name, seed=seed,
                                                  epochs=head_epochs)
        test_dets = [rescore_detections(seq.detections, result.head, seed=seed)
                     for seq in test_seqs]
        for variant in MOTION_VARIANTS:
            motas, idf1s = [], []
            for seq, dets in zip(test_seqs, test_dets):
                maps = predicted_maps(nets[variant], seq) if variant in nets else None
                mota, idf = evaluate_tracking(seq, dets, variant, tracker_config, maps)
                motas.append(mota.mota)
                idf1s.append(idf.idf1)
            rows.append(AblationRow(variant, loss_name,
                                    float(np.mean(motas)), float(np.mean(idf1s))))
    return rows


def scan_mode_ordering(scenario: str = "rotate", seeds=(0, 1, 2), train_sequences: int = 3,
                       test_sequences: int = 1, n_frames: int = 40, image_size=(128, 128),
                       n_objects: int = 10,
                       settings: TrainSettings | None = None) -> dict[str, float]:
    """Mean held-out map L1 per scan mode over several seeds."""
    settings = settings or TrainSettings()
    totals = {mode: [] for mode in ("both", "vertical", "horizontal", "none")}
    for seed in seeds:
        train_seqs = simworld.make_dataset(scenario, train_sequences, n_frames, seed=seed,
                                           image_size=image_size, n_objects=n_objects)
        test_seqs = simworld.make_dataset(scenario, test_sequences, n_frames,
                                          seed=seed + 500, image_size=image_size,
                                          n_objects=n_objects)
        for mode in totals:
            net, _ = fit_motion_net(train_seqs, settings, mode, seed=seed)
            totals[mode].append(heldout_l1(net, test_seqs))
    return {mode: float(np.mean(vals)) for mode, vals in totals.items()}
