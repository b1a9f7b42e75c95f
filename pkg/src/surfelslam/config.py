"""Pipeline configuration: JSON schema with strict key checking and range
validation that names the offending key."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np

from .deformation import EnergyWeights, GraphOptimParams
from .errors import ConfigError
from .loops import LoopParams
from .registration import RegistrationParams
from .simulate import Patch, ScannerSpec, World, preset_scanner, preset_world


def _check_keys(section: str, doc: dict, allowed) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key '{section}.{unknown[0]}'" if section
                          else f"unknown key '{unknown[0]}'")


def _require(cond: bool, key: str, rule: str) -> None:
    if not cond:
        raise ConfigError(f"{key} {rule}")


def _section(cls, section: str, doc: dict):
    _check_keys(section, doc, [f.name for f in fields(cls)])
    return cls(**doc)


@dataclass
class SurfelConfig:
    voxel: float = 0.5
    min_points: int = 5
    planarity_eps: float = 0.1
    merge_radius: float | None = None  # defaults to 0.5 * voxel
    max_normal_angle: float = 30.0

    def validate(self):
        _require(self.voxel > 0, "surfel.voxel", "must be > 0")
        _require(self.min_points >= 3, "surfel.min_points", "must be >= 3")
        _require(self.planarity_eps >= 0, "surfel.planarity_eps", "must be >= 0")
        if self.merge_radius is None:
            self.merge_radius = 0.5 * self.voxel
        _require(self.merge_radius > 0, "surfel.merge_radius", "must be > 0")
        _require(0 < self.max_normal_angle <= 180, "surfel.max_normal_angle",
                 "must be in (0, 180]")


@dataclass
class OdometryConfig:
    max_corr_dist: float = 1.0
    huber_delta: float = 0.1
    tol: float = 1e-6
    max_iters: int = 30
    min_matches: int = 10

    def validate(self):
        _require(self.max_corr_dist > 0, "odometry.max_corr_dist", "must be > 0")
        _require(self.huber_delta > 0, "odometry.huber_delta", "must be > 0")
        _require(self.tol > 0, "odometry.tol", "must be > 0")
        _require(self.max_iters >= 1, "odometry.max_iters", "must be >= 1")
        _require(self.min_matches >= 1, "odometry.min_matches", "must be >= 1")

    def params(self) -> RegistrationParams:
        return RegistrationParams(self.max_corr_dist, self.huber_delta, self.tol,
                                  self.max_iters, self.min_matches)


@dataclass
class DeformationConfig:
    node_spacing: float = 1.0
    k_edge: int = 2
    k_bind: int = 4
    time_window: float = 30.0
    w_rot: float = 1.0
    w_reg: float = 10.0
    w_con: float = 100.0
    w_pin: float = 100.0
    max_iters: int = 50
    rel_tol: float = 1e-6
    lambda_init: float = 1e-6

    def validate(self):
        _require(self.node_spacing > 0, "deformation.node_spacing", "must be > 0")
        _require(self.k_edge >= 1, "deformation.k_edge", "must be >= 1")
        _require(self.k_bind >= 1, "deformation.k_bind", "must be >= 1")
        _require(self.time_window > 0, "deformation.time_window", "must be > 0")
        for name in ("w_rot", "w_reg", "w_con", "w_pin"):
            _require(getattr(self, name) >= 0, f"deformation.{name}", "must be >= 0")
        _require(self.max_iters >= 1, "deformation.max_iters", "must be >= 1")
        _require(self.rel_tol >= 0, "deformation.rel_tol", "must be >= 0")
        _require(self.lambda_init > 0, "deformation.lambda_init", "must be > 0")

    def weights(self) -> EnergyWeights:
        return EnergyWeights(self.w_rot, self.w_reg, self.w_con, self.w_pin)

    def optim_params(self) -> GraphOptimParams:
        return GraphOptimParams(self.max_iters, self.rel_tol, self.lambda_init,
                                time_window=self.time_window)


@dataclass
class LoopConfig:
    min_time_gap: float = 20.0
    max_detect_dist: float = 3.0
    submap_halfwidth: float = 5.0
    max_fitness: float = 0.1
    min_inliers: float = 0.3
    n_samples: int = 50
    verify_max_corr_dist: float = 3.0
    verify_max_iters: int = 60
    verify_huber_delta: float = 0.3

    def validate(self):
        _require(self.min_time_gap > 0, "loop.min_time_gap", "must be > 0")
        _require(self.max_detect_dist > 0, "loop.max_detect_dist", "must be > 0")
        _require(self.submap_halfwidth > 0, "loop.submap_halfwidth", "must be > 0")
        _require(self.max_fitness > 0, "loop.max_fitness", "must be > 0")
        _require(0 <= self.min_inliers <= 1, "loop.min_inliers", "must be in [0, 1]")
        _require(self.n_samples >= 1, "loop.n_samples", "must be >= 1")
        _require(self.verify_max_corr_dist > 0, "loop.verify_max_corr_dist", "must be > 0")
        _require(self.verify_max_iters >= 1, "loop.verify_max_iters", "must be >= 1")
        _require(self.verify_huber_delta > 0, "loop.verify_huber_delta", "must be > 0")

    def params(self) -> LoopParams:
        return LoopParams(self.min_time_gap, self.max_detect_dist, self.submap_halfwidth,
                          self.max_fitness, self.min_inliers, self.n_samples,
                          self.verify_max_corr_dist, self.verify_max_iters,
                          self.verify_huber_delta)


@dataclass
class DriftConfig:
    rate: float = 0.0
    yaw_rate: float = 0.0

    def validate(self):
        _require(self.rate >= 0, "drift.rate", "must be >= 0")
        _require(self.yaw_rate >= 0, "drift.yaw_rate", "must be >= 0")


@dataclass
class SimConfig:
    speed: float = 1.0
    control_spacing: float = 0.2
    trajectory_preset: str | None = None  # defaults to the world preset

    def validate(self):
        _require(self.speed > 0, "sim.speed", "must be > 0")
        _require(self.control_spacing > 0, "sim.control_spacing", "must be > 0")


@dataclass
class InputConfig:
    sweeps_dir: str | None = None
    prior_trajectory: str | None = None
    gt_trajectory: str | None = None

    def validate(self):
        if self.sweeps_dir is not None:
            _require(self.prior_trajectory is not None, "input.prior_trajectory",
                     "is required when input.sweeps_dir is set")


def world_from_dict(doc: dict) -> World:
    _check_keys("world", doc, ["preset", "patches", "name"])
    has_preset = "preset" in doc and doc["preset"] is not None
    has_patches = "patches" in doc and doc["patches"] is not None
    _require(has_preset != has_patches, "world", "needs exactly one of 'preset' or 'patches'")
    if has_preset:
        return preset_world(doc["preset"])
    patches = []
    for i, p in enumerate(doc["patches"]):
        _check_keys(f"world.patches[{i}]", p, ["corner", "edge_u", "edge_v"])
        patches.append(Patch(np.asarray(p["corner"], float),
                             np.asarray(p["edge_u"], float),
                             np.asarray(p["edge_v"], float)))
    return World(patches, name=doc.get("name", "custom"))


def world_to_dict(world: World) -> dict:
    return {
        "name": world.name,
        "patches": [
            {"corner": p.corner.tolist(), "edge_u": p.edge_u.tolist(), "edge_v": p.edge_v.tolist()}
            for p in world.patches
        ],
    }


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str | None = None
    world: dict = field(default_factory=lambda: {"preset": "corridor-loop"})
    scanner: dict = field(default_factory=dict)
    drift: DriftConfig = field(default_factory=DriftConfig)
    surfel: SurfelConfig = field(default_factory=SurfelConfig)
    odometry: OdometryConfig = field(default_factory=OdometryConfig)
    deformation: DeformationConfig = field(default_factory=DeformationConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    input: InputConfig = field(default_factory=InputConfig)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        _check_keys("", doc, ["seed", "out", "world", "scanner", "drift", "surfel",
                              "odometry", "deformation", "loop", "sim", "input"])
        cfg = cls(
            seed=int(doc.get("seed", 0)),
            out=doc.get("out"),
            world=dict(doc.get("world", {"preset": "corridor-loop"})),
            scanner=dict(doc.get("scanner", {})),
            drift=_section(DriftConfig, "drift", doc.get("drift", {})),
            surfel=_section(SurfelConfig, "surfel", doc.get("surfel", {})),
            odometry=_section(OdometryConfig, "odometry", doc.get("odometry", {})),
            deformation=_section(DeformationConfig, "deformation", doc.get("deformation", {})),
            loop=_section(LoopConfig, "loop", doc.get("loop", {})),
            sim=_section(SimConfig, "sim", doc.get("sim", {})),
            input=_section(InputConfig, "input", doc.get("input", {})),
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "PipelineConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def validate(self):
        for section in (self.drift, self.surfel, self.odometry, self.deformation,
                        self.loop, self.sim, self.input):
            section.validate()
        self.build_scanner()  # validates scanner keys/ranges

    @property
    def world_preset(self) -> str | None:
        return self.world.get("preset")

    def build_world(self) -> World:
        return world_from_dict(self.world)

    def build_scanner(self) -> ScannerSpec:
        _check_keys("scanner", self.scanner,
                    ["rays", "duration", "max_range", "noise_sigma", "elevations"])
        base = preset_scanner(self.world_preset) if self.world_preset else ScannerSpec()
        merged = {
            "rays": base.rays, "duration": base.duration, "max_range": base.max_range,
            "noise_sigma": base.noise_sigma, "elevations": tuple(base.elevations),
        }
        merged.update(self.scanner)
        merged["elevations"] = tuple(merged["elevations"])
        try:
            return ScannerSpec(**merged)
        except ValueError as exc:
            raise ConfigError(f"scanner: {exc}") from exc

    def trajectory_preset(self) -> str:
        name = self.sim.trajectory_preset or self.world_preset
        if name is None:
            raise ConfigError("sim.trajectory_preset is required with a custom world.patches")
        return name
