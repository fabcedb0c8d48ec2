"""Command-line entry points: simgen, train, track, eval, ablate, plot.

Every output file starts with comment-header lines recording the command
line, the seed, and the format version, so runs are self-describing and
reruns with the same seed are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import experiments, marginloss, metrics, simworld, tracker
from .motionnet import MotionNet, MotionNetConfig, train_motion
from .tensor import SgdConfig, load_checkpoint, save_checkpoint

FORMAT_VERSION = "skytrack-v1"


def _header(args, extra=()) -> list[str]:
    cmd = "skytrack " + " ".join(args._raw_argv)
    return [f"command: {cmd}", f"seed: {args.seed}", f"format: {FORMAT_VERSION}", *extra]


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "skytrack"
    import matplotlib.pyplot as plt

    return plt


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(p) for p in text.lower().split("x"))
        return (h, w)
    except ValueError as exc:
        raise ValueError(f"image size must look like 256x256, got {text!r}") from exc


def _sequence_dirs(root: str) -> list[str]:
    if not os.path.isdir(root):
        raise ValueError(f"dataset directory not found: {root}")
    dirs = sorted(
        os.path.join(root, name) for name in os.listdir(root)
        if os.path.isfile(os.path.join(root, name, "config.json"))
    )
    if not dirs:
        raise ValueError(f"no sequences (config.json) found under {root}")
    return dirs


def _load_config_file(path) -> dict[str, str]:
    values = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line must be key=value, got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config_file(args: argparse.Namespace) -> None:
    # file values fill in only the flags the user did not pass
    if not getattr(args, "config", None):
        return
    values = _load_config_file(args.config)
    for key, value in values.items():
        if not hasattr(args, key):
            continue
        if key in args._explicit:
            continue
        current = getattr(args, key)
        if isinstance(current, bool):
            value = value.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        elif isinstance(current, tuple):
            value = _parse_size(value)
        setattr(args, key, value)


# ---------------------------------------------------------------------------
# commands


def cmd_simgen(args) -> int:
    header = _header(args, extra=[f"scenario: {args.scenario}"])
    os.makedirs(args.out, exist_ok=True)
    safe = args.scenario.replace("+", "_")
    for i in range(args.sequences):
        cfg = simworld.scenario_config(args.scenario, seed=args.seed * 1_000_003 + i,
                                       image_size=args.size, n_objects=args.objects)
        seq = simworld.generate_sequence(cfg, args.frames)
        seq_dir = os.path.join(args.out, f"{safe}_{i:02d}")
        simworld.save_sequence(seq_dir, seq, scenario=args.scenario, header_lines=header)
        n_boxes = sum(len(f) for f in seq.annotations)
        n_dets = sum(len(f) for f in seq.detections)
        print(f"{seq_dir}: {seq.n_frames} frames, {n_boxes} gt boxes, {n_dets} detections")
    return 0


def cmd_train(args) -> int:
    seqs = [simworld.load_sequence(d) for d in _sequence_dirs(args.data)]
    net_cfg = MotionNetConfig(correlation_radius=args.radius, width=args.width,
                              state_size=args.state_size, blocks_per_level=args.blocks,
                              scan_mode=args.scan_mode)
    net = MotionNet(net_cfg, in_channels=seqs[0].config.feature_channels, seed=args.seed)
    sgd = SgdConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs)
    curve = train_motion(seqs, net, sgd, seed=args.seed, pair_stride=args.pair_stride)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.mmck")
    save_checkpoint(ckpt_path, net.parameters())
    curve_path = os.path.join(args.out, "loss_curve.csv")
    with open(curve_path, "w", newline="") as f:
        for line in _header(args):
            f.write(f"# {line}\n")
        f.write("epoch,mean_loss\n")
        for epoch, loss in curve:
            f.write(f"{epoch},{loss:.6f}\n")
    print(f"trained {args.epochs} epochs; final mean L1 {curve[-1][1]:.4f}")
    print(f"wrote {ckpt_path} and {curve_path}")
    return 0


def _motion_maps_for(seq, args):
    if args.motion == "gtmap":
        return seq.gt_motion_maps()
    if args.motion == "mmap":
        if not args.checkpoint:
            raise ValueError("--motion mmap requires --checkpoint")
        state = load_checkpoint(args.checkpoint)
        net_cfg = MotionNetConfig(correlation_radius=args.radius, width=args.width,
                                  state_size=args.state_size, blocks_per_level=args.blocks,
                                  scan_mode=args.scan_mode)
        net = MotionNet(net_cfg, in_channels=seq.config.feature_channels, seed=args.seed)
        net.load_state(state)
        return experiments.predicted_maps(net, seq)
    return None


def cmd_track(args) -> int:
    config = tracker.TrackerConfig(score_high=args.score_high, score_low=args.score_low,
                                   iou_gate=args.iou_gate, max_age=args.max_age,
                                   min_hits=args.min_hits)
    os.makedirs(args.out, exist_ok=True)
    header = _header(args, extra=[f"motion: {args.motion}"])
    for seq_dir in _sequence_dirs(args.data):
        seq = simworld.load_sequence(seq_dir)
        dets = tracker.load_detections_csv(os.path.join(seq_dir, "det.csv"), seq.n_frames)
        maps = _motion_maps_for(seq, args)
        model = "mmap" if args.motion in ("mmap", "gtmap") else args.motion
        traj = tracker.track_sequence(dets, model, config, maps)
        name = os.path.basename(os.path.normpath(seq_dir))
        out_path = os.path.join(args.out, f"results_{name}.csv")
        tracker.write_results_csv(out_path, traj, header_lines=header)
        print(f"{name}: {traj.total_boxes()} track boxes -> {out_path}")
    return 0


def cmd_eval(args) -> int:
    rows = []
    for seq_dir in _sequence_dirs(args.gt):
        name = os.path.basename(os.path.normpath(seq_dir))
        with open(os.path.join(seq_dir, "config.json")) as f:
            n_frames = json.load(f)["n_frames"]
        result_path = os.path.join(args.results, f"results_{name}.csv")
        if not os.path.isfile(result_path):
            raise ValueError(f"missing results file {result_path}")
        gt = metrics.load_trajectories_csv(os.path.join(seq_dir, "gt.csv"), n_frames)
        pred = metrics.load_trajectories_csv(result_path, n_frames)
        mota = metrics.clear_mota(gt, pred, iou_thresh=args.iou_thresh)
        idf = metrics.idf1(gt, pred, iou_thresh=args.iou_thresh)
        rows.append((name, mota, idf))
        print(f"{name}: MOTA={mota.mota:.4f} IDF1={idf.idf1:.4f} "
              f"FP={mota.fp} FN={mota.fn} IDSW={mota.idsw}")
    metrics.write_eval_report(args.out, rows, header_lines=_header(args))
    print(f"wrote {args.out}")
    return 0


def cmd_ablate(args) -> int:
    settings = experiments.TrainSettings(learning_rate=args.lr, batch_size=args.batch_size,
                                         epochs=args.epochs, pair_stride=args.pair_stride)
    rows = experiments.run_ablation(
        scenario=args.scenario, seed=args.seed, train_sequences=args.train_sequences,
        test_sequences=args.test_sequences, n_frames=args.frames, image_size=args.size,
        n_objects=args.objects, settings=settings)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "ablation.csv")
    with open(csv_path, "w", newline="") as f:
        for line in _header(args, extra=[f"scenario: {args.scenario}"]):
            f.write(f"# {line}\n")
        f.write("motion,loss,MOTA,IDF1\n")
        for row in rows:
            f.write(f"{row.motion},{row.loss},{row.mota:.6f},{row.idf1:.6f}\n")
    plt = _figure()
    fig, ax = plt.subplots(figsize=(8, 4.5))
    variants = experiments.MOTION_VARIANTS
    x = np.arange(len(variants))
    width = 0.2
    for offset, (loss, metric) in enumerate(
            ((l, m) for l in ("ce", "mmloss") for m in ("mota", "idf1"))):
        vals = [next(getattr(r, metric) for r in rows
                     if r.motion == v and r.loss == loss) for v in variants]
        ax.bar(x + (offset - 1.5) * width, vals, width,
               label=f"{loss.upper()} {metric.upper()}")
    ax.set_xticks(x)
    ax.set_xticklabels(variants)
    ax.set_ylabel("score")
    ax.set_title(f"ablation on '{args.scenario}'")
    ax.legend(fontsize=8)
    fig.tight_layout()
    svg_path = os.path.join(args.out, "ablation.svg")
    fig.savefig(svg_path, metadata={"Date": None})
    plt.close(fig)
    for row in rows:
        print(f"{row.motion:8s} {row.loss:6s} MOTA={row.mota:.4f} IDF1={row.idf1:.4f}")
    print(f"wrote {csv_path} and {svg_path}")
    return 0


def _plot_margin(args) -> tuple[str, str]:
    xs = np.linspace(0.0, 50.0, 201)
    scales = (5.0, 10.0, 20.0)
    csv_path = os.path.join(args.out, "margin_curve.csv")
    with open(csv_path, "w", newline="") as f:
        for line in _header(args):
            f.write(f"# {line}\n")
        f.write("s,x,margin\n")
        for s in scales:
            margins = marginloss.motion_margin(xs, marginloss.MarginConfig(scale=s))
            for x, m in zip(xs, margins):
                f.write(f"{s},{x:.2f},{m:.6f}\n")
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4))
    for s in scales:
        ax.plot(xs, marginloss.motion_margin(xs, marginloss.MarginConfig(scale=s)),
                label=f"s={s:g}")
    ax.set_xlabel("motion offset (px/frame)")
    ax.set_ylabel("margin")
    ax.legend()
    fig.tight_layout()
    svg_path = os.path.join(args.out, "margin_curve.svg")
    fig.savefig(svg_path, metadata={"Date": None})
    plt.close(fig)
    return csv_path, svg_path


def _plot_scores(args) -> tuple[str, str]:
    seqs = simworld.make_dataset(args.scenario, 2, args.frames, seed=args.seed,
                                 image_size=args.size, n_objects=args.objects)
    samples = experiments.velocity_samples(seqs, seed=args.seed)
    rows = []
    for loss in ("ce", "mmloss"):
        result = marginloss.score_head_experiment(samples, loss, seed=args.seed)
        rows.extend(result.rows)
        for lo, hi in result.empty_bins:
            print(f"note: velocity bin [{lo},{hi}) empty for loss {loss}, omitted")
    csv_path = os.path.join(args.out, "score_vs_velocity.csv")
    with open(csv_path, "w", newline="") as f:
        for line in _header(args, extra=[f"scenario: {args.scenario}"]):
            f.write(f"# {line}\n")
        f.write("velocity_bin_lo,velocity_bin_hi,loss_name,mean_score,n_samples\n")
        for r in rows:
            f.write(f"{r.bin_lo:g},{r.bin_hi:g},{r.loss_name},{r.mean_score:.6f},{r.n_samples}\n")
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4))
    for loss, style in (("ce", "o--"), ("mmloss", "s-")):
        pts = [(0.5 * (r.bin_lo + r.bin_hi), r.mean_score)
               for r in rows if r.loss_name == loss]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], style, label=loss.upper())
    ax.axhline(0.5, color="red", linestyle="--", linewidth=1, label="0.5 line")
    ax.set_xlabel("object velocity (px/frame)")
    ax.set_ylabel("mean detection score")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    fig.tight_layout()
    svg_path = os.path.join(args.out, "score_vs_velocity.svg")
    fig.savefig(svg_path, metadata={"Date": None})
    plt.close(fig)
    return csv_path, svg_path


def cmd_plot(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.kind == "margin":
        csv_path, svg_path = _plot_margin(args)
    else:
        csv_path, svg_path = _plot_scores(args)
    print(f"wrote {csv_path} and {svg_path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _TrackingParser(argparse.ArgumentParser):
    """Remembers explicitly passed options so config-file values can defer."""

    def parse_args(self, argv=None, namespace=None):  # type: ignore[override]
        ns = super().parse_args(argv, namespace)
        explicit = set()
        argv = list(argv if argv is not None else sys.argv[1:])
        for token in argv:
            if token.startswith("--"):
                explicit.add(token[2:].split("=")[0].replace("-", "_"))
        ns._explicit = explicit
        return ns


def build_parser() -> _TrackingParser:
    parser = _TrackingParser(prog="skytrack",
                             description="Synthetic aerial-scene motion-map tracking")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out")
        p.add_argument("--config", default=None,
                       help="key=value file; explicit flags take precedence")

    p = sub.add_parser("simgen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--scenario", default="pan",
                   help=f"one of: {', '.join(simworld.SCENARIO_NAMES)}")
    p.add_argument("--sequences", type=int, default=2)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--size", type=_parse_size, default=(256, 256))
    p.add_argument("--objects", type=int, default=15)
    p.set_defaults(func=cmd_simgen)

    p = sub.add_parser("train", help="train the motion net on a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--pair-stride", type=int, default=2)
    p.add_argument("--radius", type=int, default=3)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--state-size", type=int, default=8)
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--scan-mode", default="both",
                   choices=("none", "vertical", "horizontal", "both"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run the tracker over a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--motion", default="kalman",
                   choices=("mmap", "kalman", "zero", "gtmap"))
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--radius", type=int, default=3)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--state-size", type=int, default=8)
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--scan-mode", default="both",
                   choices=("none", "vertical", "horizontal", "both"))
    p.add_argument("--score-high", type=float, default=0.6)
    p.add_argument("--score-low", type=float, default=0.1)
    p.add_argument("--iou-gate", type=float, default=0.3)
    p.add_argument("--max-age", type=int, default=30)
    p.add_argument("--min-hits", type=int, default=2)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score tracker results against ground truth")
    common(p)
    p.add_argument("--gt", required=True, help="dataset directory (gt.csv per sequence)")
    p.add_argument("--results", required=True, help="directory of results_*.csv files")
    p.add_argument("--iou-thresh", type=float, default=0.5)
    p.set_defaults(func=cmd_eval, out="eval_report.csv")

    p = sub.add_parser("ablate", help="run the motion/loss ablation grid")
    common(p)
    p.add_argument("--scenario", default="rotate")
    p.add_argument("--train-sequences", type=int, default=4)
    p.add_argument("--test-sequences", type=int, default=2)
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--size", type=_parse_size, default=(128, 128))
    p.add_argument("--objects", type=int, default=10)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--pair-stride", type=int, default=2)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="emit figures as CSV + SVG")
    common(p)
    p.add_argument("--kind", required=True, choices=("margin", "scores"))
    p.add_argument("--scenario", default="pan+blur")
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--size", type=_parse_size, default=(128, 128))
    p.add_argument("--objects", type=int, default=12)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args._raw_argv = argv
    try:
        _apply_config_file(args)
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
