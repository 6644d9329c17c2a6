"""Run configuration: one INI file driving every pipeline stage.

Sections: [run], [synthetic-world], [noise], [octree], [architecture],
[training], [matching], [evaluation].  Unknown sections or keys are rejected
with the full key path, so typos cannot silently fall back to defaults.
Every key is optional; defaults reproduce the standard experiment.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .bigan import BranchArchitecture
from .dataset import NoiseSpec
from .evaluation import EvalConfig
from .mapping import OctreeConfig
from .matching import SeqMatchConfig
from .pipeline import ExperimentConfig, MapExtractionConfig
from .synth import SyntheticWorldSpec
from .training import TrainConfig


class ConfigError(ValueError):
    """Raised for unknown keys or unparseable values, naming the key path."""


DEFAULT_TRAJECTORY = ((0.0, 0.0), (70.0, 0.0), (70.0, 25.0), (0.0, 25.0),
                      (0.0, 0.0))
DEFAULT_LOOP_SEGMENTS = (((160, 199), (20, 59)),)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _parse_trajectory(text: str) -> tuple:
    points = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        x, y = (float(v) for v in part.split(","))
        points.append((x, y))
    return tuple(points)


def _parse_loop_segments(text: str) -> tuple:
    """Segments like "160-199 -> 20-59", several separated by ";"."""
    segments = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        query, ref = part.split("->")
        q0, q1 = (int(v) for v in query.strip().split("-"))
        r0, r1 = (int(v) for v in ref.strip().split("-"))
        segments.append(((q0, q1), (r0, r1)))
    return tuple(segments)


@dataclass(frozen=True)
class RunConfig:
    """Everything the command-line front end needs for one run."""

    seed: int = 0
    jobs: int = 1
    world: SyntheticWorldSpec = field(
        default_factory=lambda: SyntheticWorldSpec(
            n_frames=200, trajectory=DEFAULT_TRAJECTORY,
            loop_segments=DEFAULT_LOOP_SEGMENTS,
        )
    )
    noise: NoiseSpec = NoiseSpec()
    octree: OctreeConfig = OctreeConfig()
    maps: MapExtractionConfig = MapExtractionConfig()
    arch2d: BranchArchitecture = BranchArchitecture("map2d")
    arch3d: BranchArchitecture = BranchArchitecture("map3d")
    train: TrainConfig = TrainConfig()
    match: SeqMatchConfig = SeqMatchConfig()
    eval: EvalConfig = EvalConfig()
    baseline: str = "sad"
    reference_slice: tuple = (0, 120)
    query_slice: tuple = (120, 200)

    def experiment(self) -> ExperimentConfig:
        augment = tuple(
            NoiseSpec(
                t_amp=self.noise.t_amp, r_amp=self.noise.r_amp,
                seed=self.noise.seed + 1000 + k,
                distribution=self.noise.distribution,
            )
            for k in range(self.train.augment_passes)
        )
        return ExperimentConfig(
            octree=self.octree, maps=self.maps, arch2d=self.arch2d,
            arch3d=self.arch3d, train=self.train, match=self.match,
            eval=self.eval, noise=self.noise, train_augment=augment,
            reference_slice=self.reference_slice,
            query_slice=self.query_slice,
        )


# per-section key tables: key -> (target, field, caster)
_SCHEMA = {
    "run": {
        "seed": ("run", "seed", int),
        "jobs": ("run", "jobs", int),
    },
    "synthetic-world": {
        "n_frames": ("world", "n_frames", int),
        "trajectory": ("world", "trajectory", _parse_trajectory),
        "obstacle_seed": ("world", "obstacle_seed", int),
        "loop_segments": ("world", "loop_segments", _parse_loop_segments),
        "obstacle_density": ("world", "obstacle_density", float),
        "rays_azimuth": ("world", "rays_azimuth", int),
        "rays_elevation": ("world", "rays_elevation", int),
        "elevation_min_deg": ("world", "elevation_min", float),
        "elevation_max_deg": ("world", "elevation_max", float),
        "max_range": ("world", "max_range", float),
        "sensor_height": ("world", "sensor_height", float),
        "range_noise": ("world", "range_noise", float),
    },
    "noise": {
        "t_amp": ("noise", "t_amp", float),
        "r_amp": ("noise", "r_amp", float),
        "seed": ("noise", "seed", int),
        "distribution": ("noise", "distribution", str),
    },
    "octree": {
        "leaf_resolution": ("octree", "leaf_resolution", float),
        "cull_radius": ("octree", "cull_radius", float),
        "l_hit": ("octree", "l_hit", float),
        "l_miss": ("octree", "l_miss", float),
        "l_min": ("octree", "l_min", float),
        "l_max": ("octree", "l_max", float),
        "occ_threshold": ("octree", "occ_threshold", float),
    },
    "architecture": {
        "latent_dim_2d": ("arch2d", "latent_dim", int),
        "latent_dim_3d": ("arch3d", "latent_dim", int),
        "channels_2d": ("arch2d", "channels", _parse_ints),
        "channels_3d": ("arch3d", "channels", _parse_ints),
        "disc_hidden_2d": ("arch2d", "disc_hidden", int),
        "disc_hidden_3d": ("arch3d", "disc_hidden", int),
        "voxel_grid_size": ("maps", "voxel_grid_size", int),
        "projection_grid_size": ("maps", "projection_grid_size", int),
        "top_view_size": ("maps", "top_view_size", int),
        "extraction_frame": ("maps", "frame", str),
        "top_view_mode": ("maps", "top_view_mode", str),
    },
    "training": {
        "epochs": ("train", "epochs", int),
        "batch_size": ("train", "batch_size", int),
        "seed": ("train", "seed", int),
        "learning_rate": ("train", "lr", float),
        "beta1": ("train", "beta1", float),
        "beta2": ("train", "beta2", float),
        "saturating": ("train", "saturating", _parse_bool),
        "reweight_mode": ("train", "reweight_mode", str),
        "checkpoint_every": ("train", "checkpoint_every", int),
        "augment_passes": ("train", "augment_passes", int),
    },
    "matching": {
        "ds": ("match", "ds", int),
        "v_min": ("match", "v_min", float),
        "v_max": ("match", "v_max", float),
        "v_step": ("match", "v_step", float),
        "exclusion_window": ("match", "exclusion_window", int),
        "contrast_enhance": ("match", "contrast_enhance", _parse_bool),
        "r_window": ("match", "r_window", int),
    },
    "evaluation": {
        "d_thresh": ("eval", "d_thresh", float),
        "n_thresholds": ("eval", "n_thresholds", int),
        "baseline": ("run", "baseline", str),
        "reference_slice": ("run", "reference_slice", _parse_ints),
        "query_slice": ("run", "query_slice", _parse_ints),
    },
}


def parse_config(text: str) -> RunConfig:
    """Parse INI text into a RunConfig, rejecting unknown keys."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc

    overrides = {
        "run": {}, "world": {}, "noise": {}, "octree": {}, "maps": {},
        "arch2d": {}, "arch3d": {}, "train": {},
        "match": {}, "eval": {},
    }
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        table = _SCHEMA[section]
        for key, raw in parser[section].items():
            if key not in table:
                raise ConfigError(f"unknown key [{section}] {key}")
            target, fname, caster = table[key]
            try:
                overrides[target][fname] = caster(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc

    world_kw = overrides["world"]
    elev_min = world_kw.pop("elevation_min", None)
    elev_max = world_kw.pop("elevation_max", None)
    if elev_min is not None or elev_max is not None:
        default = SyntheticWorldSpec(n_frames=1, trajectory=((0, 0), (1, 0)))
        span = (
            elev_min if elev_min is not None else default.elevation_span[0],
            elev_max if elev_max is not None else default.elevation_span[1],
        )
        world_kw["elevation_span"] = span

    maps_kw = overrides["maps"]
    top_size = maps_kw.pop("top_view_size", None)
    if top_size is not None:
        maps_kw["top_view_shape"] = (top_size, top_size)

    train_kw = overrides["train"]
    beta1 = train_kw.pop("beta1", None)
    beta2 = train_kw.pop("beta2", None)
    if beta1 is not None or beta2 is not None:
        train_kw["betas"] = (
            beta1 if beta1 is not None else 0.5,
            beta2 if beta2 is not None else 0.999,
        )

    base = RunConfig()
    try:
        world = SyntheticWorldSpec(
            n_frames=world_kw.pop("n_frames", base.world.n_frames),
            trajectory=world_kw.pop("trajectory", base.world.trajectory),
            loop_segments=world_kw.pop("loop_segments",
                                       base.world.loop_segments),
            **world_kw,
        )
        run_kw = overrides["run"]
        return RunConfig(
            seed=run_kw.get("seed", base.seed),
            jobs=run_kw.get("jobs", base.jobs),
            world=world,
            noise=NoiseSpec(**overrides["noise"]),
            octree=OctreeConfig(**overrides["octree"]),
            maps=MapExtractionConfig(**maps_kw),
            arch2d=BranchArchitecture("map2d", **overrides["arch2d"]),
            arch3d=BranchArchitecture("map3d", **overrides["arch3d"]),
            train=TrainConfig(**train_kw),
            match=SeqMatchConfig(**overrides["match"]),
            eval=EvalConfig(**overrides["eval"]),
            baseline=run_kw.get("baseline", base.baseline),
            reference_slice=tuple(
                run_kw.get("reference_slice", base.reference_slice)
            ),
            query_slice=tuple(run_kw.get("query_slice", base.query_slice)),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None) -> RunConfig:
    """Load a RunConfig from an INI file; None gives pure defaults."""
    if path is None:
        return RunConfig()
    from pathlib import Path

    text = Path(path).read_text()
    return parse_config(text)
