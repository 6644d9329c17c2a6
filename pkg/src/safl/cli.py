"""Command-line front end for the full loop-closure pipeline.

Subcommands mirror the pipeline stages:

  synth    generate a synthetic dataset (frames/NNNNNN.bin + poses.txt)
  extract  build the local map and write per-frame map pairs (.vox / .top)
  train    fit both adversarial branches on one or more map directories
  infer    encode a map directory into a stitched feature file
  match    sequence-match query features against a reference bank
  eval     score match proposals against ground-truth poses
  plot     render difference matrices, curves and weight histories to SVG

All stages read the same INI config (--config, or the SAFL_CONFIG
environment variable when the flag is absent).  Exit codes: 0 success,
2 configuration or usage errors, 3 missing inputs, 4 malformed dataset
content, 5 binary container errors, 6 non-finite training loss, 1 anything
else.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import formats, matching, training
from .bigan import BiGANBranch
from .config import ConfigError, RunConfig, load_config
from .dataset import (MalformedFrame, MalformedPose, NoiseSpec,
                      format_pose_file, inject_viewpoint_noise, load_dataset,
                      parse_pose_file, write_dataset)
from .evaluation import (EvalReport, compare_methods, evaluate,
                         storage_projection)
from .formats import FormatError
from .mapping import mapper_throughput
from .matching import MatchResult, sequence_match
from .pipeline import extract_map_passes, method_features, sad_features
from .synth import generate_synthetic_sequence
from .training import NonFiniteLoss, TrainingPairSet


def _load_run_config(args) -> RunConfig:
    path = args.config or os.environ.get("SAFL_CONFIG") or None
    cfg = load_config(path)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed,
                      train=replace(cfg.train, seed=args.seed))
    if getattr(args, "jobs", None) is not None:
        cfg = replace(cfg, jobs=args.jobs)
    import torch

    torch.set_num_threads(max(cfg.jobs, 1))
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    cfg = _load_run_config(args)
    world = cfg.world
    if args.seed is not None:
        world = replace(world, obstacle_seed=args.seed)
    clouds, poses = generate_synthetic_sequence(world)
    out = _out_dir(args)
    write_dataset(out, clouds, poses)
    print(f"wrote {len(clouds)} frames to {out}")
    return 0


def cmd_extract(args) -> int:
    cfg = _load_run_config(args)
    clouds, poses = load_dataset(args.dataset)
    extraction_poses = list(poses)
    if args.noise:
        extraction_poses = inject_viewpoint_noise(poses, cfg.noise)
    pairs = extract_map_passes(
        clouds, poses, cfg.octree, cfg.maps, [extraction_poses]
    )[0]
    lo, hi = 0, len(pairs)
    if args.frames:
        try:
            lo, hi = (int(v) for v in args.frames.split(":"))
        except ValueError as exc:
            raise ConfigError(f"--frames expects START:STOP, {exc}") from None
        if not 0 <= lo < hi <= len(pairs):
            raise ConfigError(
                f"--frames {args.frames} outside 0:{len(pairs)}"
            )
    out = _out_dir(args)
    cell3d = 2 * cfg.octree.cull_radius / cfg.maps.voxel_grid_size
    cell2d = 2 * cfg.octree.cull_radius / cfg.maps.projection_grid_size
    for i in range(lo, hi):
        origin = extraction_poses[i].translation
        formats.write_voxel_grid(out / f"{i - lo:06d}.vox", pairs.voxels[i],
                                 cell3d, origin)
        formats.write_top_view(out / f"{i - lo:06d}.top", pairs.top_views[i],
                               cell2d, origin)
    (out / "extraction_poses.txt").write_text(
        format_pose_file(extraction_poses[lo:hi])
    )
    (out / "true_poses.txt").write_text(format_pose_file(poses[lo:hi]))
    if args.throughput:
        hz = mapper_throughput(clouds, poses, cfg.octree,
                               grid_size=cfg.maps.voxel_grid_size,
                               projection_grid=cfg.maps.projection_grid_size)
        print(f"mapper throughput: {hz:.2f} Hz")
    print(f"wrote {hi - lo} map pairs to {out}")
    return 0


def _load_map_dir(path) -> TrainingPairSet:
    root = Path(path)
    vox_files = sorted(root.glob("*.vox"))
    top_files = sorted(root.glob("*.top"))
    if not vox_files or len(vox_files) != len(top_files):
        raise FileNotFoundError(
            f"{root}: need matching *.vox and *.top files "
            f"({len(vox_files)} vs {len(top_files)})"
        )
    voxels = np.stack([formats.read_voxel_grid(p)[0] for p in vox_files])
    tops = np.stack([formats.read_top_view(p)[0] for p in top_files])
    return TrainingPairSet(voxels.astype(np.float32), tops)


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    pairs = [_load_map_dir(d) for d in args.maps]
    merged = TrainingPairSet(
        np.concatenate([p.voxels for p in pairs]),
        np.concatenate([p.top_views for p in pairs]),
    )
    train_cfg = cfg.train
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    out = _out_dir(args)
    train_cfg = replace(train_cfg, out_dir=str(out))

    if args.resume:
        branch3d = BiGANBranch.load(Path(args.resume) / "branch3d.ckpt")
        branch2d = BiGANBranch.load(Path(args.resume) / "branch2d.ckpt")
    else:
        g3 = cfg.maps.voxel_grid_size
        arch3d = type(cfg.arch3d)(
            "map3d", input_shape=(g3,) * 3, latent_dim=cfg.arch3d.latent_dim,
            channels=cfg.arch3d.channels, disc_hidden=cfg.arch3d.disc_hidden,
        )
        arch2d = type(cfg.arch2d)(
            "map2d", input_shape=cfg.maps.top_view_shape,
            latent_dim=cfg.arch2d.latent_dim, channels=cfg.arch2d.channels,
            disc_hidden=cfg.arch2d.disc_hidden,
        )
        branch3d = BiGANBranch.create(arch3d, seed=train_cfg.seed,
                                      lr=train_cfg.lr, betas=train_cfg.betas)
        branch2d = BiGANBranch.create(arch2d, seed=train_cfg.seed + 1,
                                      lr=train_cfg.lr, betas=train_cfg.betas)

    result = training.train(merged, branch3d, branch2d, train_cfg)

    rows = []
    for epoch, weights in enumerate(result.weights_history):
        rows.extend((epoch, i, f"{w:.10e}") for i, w in enumerate(weights))
    _write_csv(out / "weights_history.csv", ["epoch", "sample_id", "weight"],
               rows)
    rows = []
    for domain, history in (("3d", result.value_history_3d),
                            ("2d", result.value_history_2d)):
        for epoch, estimates in enumerate(history):
            rows.extend(
                (epoch, step, domain, f"{e.value:.6e}",
                 f"{e.d_real_mean:.6e}", f"{e.d_fake_mean:.6e}")
                for step, e in enumerate(estimates)
            )
    _write_csv(out / "values.csv",
               ["epoch", "step", "domain", "value", "d_real_mean",
                "d_fake_mean"], rows)
    print(f"trained {train_cfg.epochs} epochs on {len(merged)} pairs -> {out}")
    return 0


def cmd_infer(args) -> int:
    _load_run_config(args)
    pairs = _load_map_dir(args.maps)
    branch3d = BiGANBranch.load(Path(args.checkpoints) / "branch3d.ckpt")
    branch2d = BiGANBranch.load(Path(args.checkpoints) / "branch2d.ckpt")
    features, latency = training.infer_sequence(pairs, branch3d, branch2d)
    out = _out_dir(args)
    formats.write_features(out / "features.bin", features)
    _write_csv(out / "latency.csv", ["component", "mean_ms"], [
        ("3d", f"{latency.mean_3d_ms:.4f}"),
        ("2d", f"{latency.mean_2d_ms:.4f}"),
        ("stitch", f"{latency.mean_stitch_ms:.4f}"),
    ])
    print(f"encoded {len(features)} frames -> {out / 'features.bin'}")
    return 0


def cmd_match(args) -> int:
    cfg = _load_run_config(args)
    if args.method == "sad":
        if not args.query_maps or not args.reference_maps:
            raise ConfigError("--method sad needs --query-maps and "
                              "--reference-maps")
        q = sad_features(_load_map_dir(args.query_maps).top_views)
        r = sad_features(_load_map_dir(args.reference_maps).top_views)
        dm = matching.difference_matrix(q, r, metric="sad")
    else:
        if not args.query or not args.reference:
            raise ConfigError(f"--method {args.method} needs --query and "
                              "--reference feature files")
        q = formats.read_features(args.query)
        r = formats.read_features(args.reference)
        split = cfg.arch2d.latent_dim
        q = method_features(q, args.method, split)
        r = method_features(r, args.method, split)
        dm = matching.difference_matrix(q, r)
    results = sequence_match(dm, cfg.match)
    out = _out_dir(args)
    formats.write_difference_matrix(out / "difference.bin", dm)
    _write_csv(out / "matches.csv",
               ["query_id", "match_id", "score", "ratio", "valid"],
               [(m.query_id, m.match_id, f"{m.score:.6e}", f"{m.ratio:.6e}",
                 int(m.valid)) for m in results])
    n_valid = sum(m.valid for m in results)
    print(f"matched {n_valid}/{len(results)} queries -> {out / 'matches.csv'}")
    return 0


def _read_matches_csv(path) -> list[MatchResult]:
    results = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            results.append(MatchResult(
                query_id=int(row["query_id"]), match_id=int(row["match_id"]),
                score=float(row["score"]), ratio=float(row["ratio"]),
                valid=bool(int(row["valid"])),
            ))
    return results


def _parse_named(values, flag) -> dict:
    named = {}
    for value in values or ():
        if "=" not in value:
            raise ConfigError(f"{flag} expects NAME=PATH, got {value!r}")
        name, path = value.split("=", 1)
        named[name] = path
    return named


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    named = _parse_named(args.matches, "--matches")
    if not named:
        raise ConfigError("eval needs at least one --matches NAME=FILE")
    query_poses = parse_pose_file(Path(args.query_poses).read_text())
    ref_poses = parse_pose_file(Path(args.reference_poses).read_text())
    out = _out_dir(args)

    reports: dict[str, EvalReport] = {}
    for name, path in named.items():
        matches = _read_matches_csv(path)
        reports[name] = evaluate(matches, query_poses, ref_poses, cfg.eval,
                                 method=name)
        _write_csv(out / f"{name}_pr.csv",
                   ["threshold", "precision", "recall"],
                   [(f"{t:.6e}", f"{p:.6f}", f"{r:.6f}")
                    for t, p, r in reports[name].pr_points])
        _write_csv(out / f"{name}_roc.csv", ["threshold", "fpr", "tpr"],
                   [(f"{t:.6e}", f"{x:.6f}", f"{y:.6f}")
                    for t, x, y in reports[name].roc_points])

    baseline = cfg.baseline if cfg.baseline in reports else sorted(reports)[0]
    rows = compare_methods({n: {"default": r} for n, r in reports.items()},
                           baseline)
    _write_csv(out / "metrics.csv",
               ["method", "auc", "recall_at_full_precision",
                "auc_vs_baseline", "n_positive", "n_negative", "n_proposals"],
               [(r["method"], f"{r['auc']:.6f}",
                 f"{r['recall_at_full_precision']:.6f}",
                 f"{r['auc_vs_baseline']:.6f}", reports[r["method"]].n_positive,
                 reports[r["method"]].n_negative,
                 reports[r["method"]].n_proposals) for r in rows])

    storage = storage_projection()
    _write_csv(out / "storage.csv",
               ["rate_hz", "hours", "bytes_per_frame", "frames",
                "total_bytes", "gib"],
               [(5.0, 24.0, storage["bytes_per_frame"], storage["frames"],
                 storage["total_bytes"], f"{storage['gib']:.3f}")])

    _plot_curves(out / "pr_curves.svg", reports, "pr_points",
                 "recall", "precision")
    _plot_curves(out / "roc_curves.svg", reports, "roc_points", "fpr", "tpr")
    for name, report in sorted(reports.items()):
        print(f"{name}: auc={report.auc:.4f} "
              f"recall@100%P={report.recall_at_full_precision:.4f}")
    return 0


def _plot_curves(path, reports, attr, xlabel, ylabel) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, report in sorted(reports.items()):
        points = getattr(report, attr)
        xs = [p[1] if attr == "roc_points" else p[2] for p in points]
        ys = [p[2] if attr == "roc_points" else p[1] for p in points]
        ax.plot(xs, ys, marker=".", label=f"{name} (auc={report.auc:.3f})"
                if attr == "roc_points" else name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_plot(args) -> int:
    _load_run_config(args)
    out = _out_dir(args)
    made = []
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if args.difference:
        dm = formats.read_difference_matrix(args.difference)
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(dm, aspect="auto", cmap="viridis")
        ax.set_xlabel("reference frame")
        ax.set_ylabel("query frame")
        fig.colorbar(im, ax=ax, label="feature difference")
        fig.tight_layout()
        fig.savefig(out / "difference.svg", format="svg")
        plt.close(fig)
        made.append("difference.svg")
    if args.weights:
        epochs, samples, weights = [], [], []
        with open(args.weights, newline="") as f:
            for row in csv.DictReader(f):
                epochs.append(int(row["epoch"]))
                samples.append(int(row["sample_id"]))
                weights.append(float(row["weight"]))
        n = max(samples) + 1
        e = max(epochs) + 1
        mat = np.zeros((e, n))
        mat[epochs, samples] = weights
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(mat, aspect="auto", cmap="magma")
        ax.set_xlabel("sample")
        ax.set_ylabel("epoch")
        fig.colorbar(im, ax=ax, label="weight")
        fig.tight_layout()
        fig.savefig(out / "weights.svg", format="svg")
        plt.close(fig)
        made.append("weights.svg")
    for flag, name in ((args.pr, "pr"), (args.roc, "roc")):
        named = _parse_named(flag, f"--{name}")
        if not named:
            continue
        fig, ax = plt.subplots(figsize=(5, 4))
        for label, path in sorted(named.items()):
            with open(path, newline="") as f:
                rows = list(csv.DictReader(f))
            if name == "pr":
                xs = [float(r["recall"]) for r in rows]
                ys = [float(r["precision"]) for r in rows]
                ax.set_xlabel("recall")
                ax.set_ylabel("precision")
            else:
                xs = [float(r["fpr"]) for r in rows]
                ys = [float(r["tpr"]) for r in rows]
                ax.set_xlabel("fpr")
                ax.set_ylabel("tpr")
            ax.plot(xs, ys, marker=".", label=label)
        ax.set_xlim(-0.02, 1.02)
        ax.set_ylim(-0.02, 1.02)
        ax.legend(loc="best", fontsize=8)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(out / f"{name}_curves.svg", format="svg")
        plt.close(fig)
        made.append(f"{name}_curves.svg")
    if not made:
        raise ConfigError("plot needs at least one input "
                          "(--difference/--weights/--pr/--roc)")
    print(f"wrote {', '.join(made)} to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safl",
        description="LiDAR loop-closure detection from adversarially "
                    "learned local-map features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config path "
                       "(default: $SAFL_CONFIG or built-in defaults)")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--jobs", type=int, help="cap worker threads")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="map a dataset and write map pairs")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--noise", action="store_true",
                   help="perturb extraction poses with the [noise] section")
    p.add_argument("--frames", metavar="START:STOP",
                   help="write only this frame slice (renumbered from 0)")
    p.add_argument("--throughput", action="store_true",
                   help="also report mapping throughput in Hz")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train both branches on map pairs")
    common(p)
    p.add_argument("--maps", action="append", required=True,
                   help="map directory (repeatable)")
    p.add_argument("--epochs", type=int, help="override [training] epochs")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="encode map pairs into features")
    common(p)
    p.add_argument("--maps", required=True, help="map directory")
    p.add_argument("--checkpoints", required=True,
                   help="directory with branch2d.ckpt / branch3d.ckpt")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("match", help="sequence-match query features")
    common(p)
    p.add_argument("--query", help="query feature file")
    p.add_argument("--reference", help="reference feature file")
    p.add_argument("--method", default="mixture",
                   choices=("mixture", "2d", "3d", "sad"))
    p.add_argument("--query-maps", help="query map directory (sad)")
    p.add_argument("--reference-maps", help="reference map directory (sad)")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="evaluate match proposals")
    common(p)
    p.add_argument("--matches", action="append", required=True,
                   metavar="NAME=FILE", help="matches.csv per method")
    p.add_argument("--query-poses", required=True)
    p.add_argument("--reference-poses", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render artifacts to SVG")
    common(p)
    p.add_argument("--difference", help="difference-matrix file")
    p.add_argument("--weights", help="weights_history.csv")
    p.add_argument("--pr", action="append", metavar="NAME=FILE")
    p.add_argument("--roc", action="append", metavar="NAME=FILE")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 3
    except (MalformedFrame, MalformedPose) as exc:
        print(f"malformed data: {exc}", file=sys.stderr)
        return 4
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 5
    except NonFiniteLoss as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 6
    except Exception as exc:  # stable nonzero code for anything unexpected
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
