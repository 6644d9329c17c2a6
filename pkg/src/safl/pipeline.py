"""End-to-end orchestration: scans to maps to features to evaluation.

These helpers tie the stages together for scripts and the command-line front
end: sweep the local map over a sequence extracting aligned map pairs
(optionally at perturbed extraction poses, the viewpoint-difference model),
train the two branches, encode feature banks, and score loop-closure quality
per method against a reference/query split of the trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import matching, training
from .bigan import BiGANBranch, BranchArchitecture
from .dataset import NoiseSpec, inject_viewpoint_noise
from .evaluation import EvalConfig, evaluate
from .mapping import (LocalOctree, OctreeConfig, extract_voxel_grid,
                      project_top_view)
from .matching import SeqMatchConfig, difference_matrix, sequence_match
from .training import TrainConfig, TrainingPairSet


@dataclass(frozen=True)
class MapExtractionConfig:
    """Shapes of the per-frame map products."""

    voxel_grid_size: int = 32
    projection_grid_size: int = 64
    top_view_shape: tuple = (64, 64)
    frame: str = "yaw"
    top_view_mode: str = "binary"


def extract_map_passes(clouds, poses, octree_config: OctreeConfig,
                       map_config: MapExtractionConfig,
                       pose_sets: list) -> list[TrainingPairSet]:
    """One map sweep, extracting each frame at several extraction poses.

    The octree is always updated with the true pose of each scan; pose_sets
    supplies per-pass extraction poses (viewpoint perturbations reuse the
    same map content).  Returns one TrainingPairSet per pose set.
    """
    tree = LocalOctree(octree_config)
    n_passes = len(pose_sets)
    voxels = [[] for _ in range(n_passes)]
    tops = [[] for _ in range(n_passes)]
    for i, (cloud, pose) in enumerate(zip(clouds, poses)):
        tree.update_with_scan(cloud, pose)
        for k, pset in enumerate(pose_sets):
            grid = extract_voxel_grid(
                tree, map_config.voxel_grid_size, frame=map_config.frame,
                pose=pset[i],
            )
            proj = extract_voxel_grid(
                tree, map_config.projection_grid_size, frame=map_config.frame,
                pose=pset[i],
            )
            top = project_top_view(proj, map_config.top_view_shape,
                                   mode=map_config.top_view_mode)
            voxels[k].append(grid.occupancy)
            tops[k].append(top.pixels)
    return [
        TrainingPairSet(np.stack(voxels[k]).astype(np.float32),
                        np.stack(tops[k]).astype(np.float32))
        for k in range(n_passes)
    ]


def extract_map_pairs(clouds, poses,
                      octree_config: OctreeConfig = OctreeConfig(),
                      map_config: MapExtractionConfig = MapExtractionConfig(),
                      extraction_poses=None) -> TrainingPairSet:
    """Map the sequence and extract one aligned (voxel, top-view) pair per frame."""
    pose_set = list(extraction_poses) if extraction_poses is not None else list(poses)
    return extract_map_passes(
        clouds, poses, octree_config, map_config, [pose_set]
    )[0]


def concat_pairs(*sets: TrainingPairSet) -> TrainingPairSet:
    return TrainingPairSet(
        np.concatenate([s.voxels for s in sets]),
        np.concatenate([s.top_views for s in sets]),
    )


def method_features(features: np.ndarray, method: str,
                    split_at: int) -> np.ndarray:
    """Select the feature block for a method: both domains or one alone."""
    if method == "mixture":
        return features
    if method == "2d":
        return features[:, :split_at]
    if method == "3d":
        return features[:, split_at:]
    raise ValueError(f"unknown method {method!r}")


def sad_features(top_views: np.ndarray) -> np.ndarray:
    return np.stack([matching.sad_feature(tv) for tv in top_views])


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one loop-closure evaluation run depends on."""

    octree: OctreeConfig = OctreeConfig()
    maps: MapExtractionConfig = MapExtractionConfig()
    arch2d: BranchArchitecture = BranchArchitecture("map2d")
    arch3d: BranchArchitecture = BranchArchitecture("map3d")
    train: TrainConfig = TrainConfig()
    match: SeqMatchConfig = SeqMatchConfig()
    eval: EvalConfig = EvalConfig()
    noise: NoiseSpec = NoiseSpec()
    train_augment: tuple = ()  # NoiseSpec per extra training pass
    methods: tuple = ("mixture", "2d", "3d", "sad")
    reference_slice: tuple = (0, 120)
    query_slice: tuple = (120, 200)


@dataclass(eq=False)
class ExperimentResult:
    reports: dict
    matches: dict
    latency: training.LatencyReport
    train_result: training.TrainResult
    features_reference: np.ndarray
    features_query: np.ndarray


def loop_closure_experiment(clouds, poses,
                            config: ExperimentConfig) -> ExperimentResult:
    """Train on the reference slice and evaluate noisy queries against it.

    Reference maps are extracted at the true poses; query maps re-extract the
    same map content at noise-injected poses.  Ground truth uses the true
    poses.  Returns per-method evaluation reports keyed by config.methods.
    """
    r0, r1 = config.reference_slice
    q0, q1 = config.query_slice
    pose_sets = [list(poses)]
    for aug in config.train_augment:
        pose_sets.append(inject_viewpoint_noise(poses, aug))
    pose_sets.append(inject_viewpoint_noise(poses, config.noise))
    passes = extract_map_passes(clouds, poses, config.octree, config.maps,
                                pose_sets)
    true_pass, aug_passes, noisy_pass = passes[0], passes[1:-1], passes[-1]

    def narrow(pairs, lo, hi):
        return TrainingPairSet(pairs.voxels[lo:hi], pairs.top_views[lo:hi])

    train_pairs = concat_pairs(
        narrow(true_pass, r0, r1),
        *[narrow(p, r0, r1) for p in aug_passes],
    )
    branch3d = BiGANBranch.create(config.arch3d, seed=config.train.seed,
                                  lr=config.train.lr, betas=config.train.betas)
    branch2d = BiGANBranch.create(config.arch2d, seed=config.train.seed + 1,
                                  lr=config.train.lr, betas=config.train.betas)
    train_result = training.train(train_pairs, branch3d, branch2d, config.train)

    ref_pairs = narrow(true_pass, r0, r1)
    query_pairs = narrow(noisy_pass, q0, q1)
    ref_feats, _ = training.infer_sequence(ref_pairs, branch3d, branch2d)
    query_feats, latency = training.infer_sequence(query_pairs, branch3d,
                                                   branch2d)

    reports, match_lists = {}, {}
    split_at = config.arch2d.latent_dim
    for method in config.methods:
        if method == "sad":
            dm = difference_matrix(
                sad_features(query_pairs.top_views),
                sad_features(ref_pairs.top_views), metric="sad",
            )
        else:
            dm = difference_matrix(
                method_features(query_feats, method, split_at),
                method_features(ref_feats, method, split_at),
            )
        match_lists[method] = sequence_match(dm, config.match)
        reports[method] = evaluate(
            match_lists[method], poses[q0:q1], poses[r0:r1], config.eval,
            method=method,
        )
    return ExperimentResult(
        reports=reports, matches=match_lists, latency=latency,
        train_result=train_result, features_reference=ref_feats,
        features_query=query_feats,
    )
