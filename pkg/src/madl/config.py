"""INI configuration: one section per stage, parsed into dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .curb import BeamParams, CurbParams, CurbThresholds, GprParams, WindowParams
from .geometry import MadlError, PathLike
from .ground import GroundParams
from .labels import LabelParams
from .mapping import RegistrationConfig
from .review import DEFAULT_INSTRUCTIONS, HeuristicThresholds, RemoteConfig
from .synthetic import Box, SceneSpec


class ConfigError(MadlError):
    pass


@dataclass(frozen=True)
class RunSection:
    input: str = "data"
    output: str = "out"
    workers: int = 0  # 0 = all cores
    noise_sigma: float = 0.0  # used by ``synth`` only

    def __post_init__(self):
        if self.workers < 0:
            raise ValueError("workers must be >= 0")


@dataclass(frozen=True)
class CurbSection:
    crop_limit: float = 30.0
    H1: float = 0.05
    H2: float = 0.30
    H3: float = 0.04
    Ts: float = 0.002
    window_span: float = 1.5
    delta_min: float = 0.02
    delta_max: float = 1.0
    beam_bins: int = 360
    beam_max_range: float = 40.0
    region_halfwidth_deg: float = 45.0
    boundary_extrapolation: float = 1.0

    def __post_init__(self):
        if self.crop_limit <= 0 or not 0 < self.delta_min <= self.delta_max or self.window_span <= 0:
            raise ValueError("invalid [curb] geometry settings")
        if not 0 < self.region_halfwidth_deg <= 90:
            raise ValueError("region_halfwidth_deg must be in (0, 90]")


@dataclass(frozen=True)
class MappingSection:
    voxel_size: float = 0.2
    curb_vote_weight: float = 5.0
    gate: float = 1.0
    max_iterations: int = 60
    translation_eps: float = 1e-5
    rotation_eps: float = 1e-6
    weight_scheme: str = "constant"
    huber_delta: float = 0.1
    match_labels: bool = True
    curb_weight: float = 10.0
    query_radius: float = 60.0

    def __post_init__(self):
        if self.voxel_size <= 0 or self.query_radius <= 0 or self.curb_vote_weight <= 0:
            raise ValueError("invalid [mapping] settings")


@dataclass(frozen=True)
class ProjectionSection:
    hull_k: int = 12
    curb_tolerance: float = 0.2
    image_width: int = 1242
    image_height: int = 375

    def __post_init__(self):
        if self.hull_k < 3 or self.curb_tolerance <= 0 or self.image_width < 1 or self.image_height < 1:
            raise ValueError("invalid [projection] settings")


@dataclass(frozen=True)
class ReviewSection:
    mode: str = "heuristic"  # or "remote"
    endpoint: str = ""
    timeout: float = 30.0
    fallback: bool = True
    max_in_flight: int = 4
    instructions: str = DEFAULT_INSTRUCTIONS
    n_min: int = 30
    r_max: float = 0.2
    s_min: float = 10.0
    adi_resolution: float = 0.2
    bev_resolution: float = 0.1
    extent: float = 40.0

    def __post_init__(self):
        if self.mode not in ("heuristic", "remote"):
            raise ValueError("review mode must be heuristic or remote")
        if self.timeout <= 0 or self.max_in_flight < 1 or self.adi_resolution <= 0 or self.bev_resolution <= 0:
            raise ValueError("invalid [review] settings")


@dataclass(frozen=True)
class SynthSection:
    road_width: float = 8.0
    curb_height: float = 0.15
    curvature: float = 0.01
    length: float = 200.0
    straight_length: float = 70.0
    sidewalk_width: float = 3.0
    wall_height: float = 4.0
    # "x y z sx sy sz" boxes separated by ";" (scene-frame coordinates)
    obstacles: str = "30 6 0.9 2 1 1.5; 55 -5.5 0.65 1 1 1"
    random_obstacles: int = 0
    seed: int = 7
    num_frames: int = 50
    frame_spacing: float = 2.0
    first_frame_s: float = 10.0


@dataclass(frozen=True)
class PipelineConfig:
    run: RunSection = field(default_factory=RunSection)
    ground: GroundParams = field(default_factory=GroundParams)
    curb: CurbSection = field(default_factory=CurbSection)
    gpr: GprParams = field(default_factory=GprParams)
    mapping: MappingSection = field(default_factory=MappingSection)
    projection: ProjectionSection = field(default_factory=ProjectionSection)
    review: ReviewSection = field(default_factory=ReviewSection)
    synth: SynthSection = field(default_factory=SynthSection)
    source: str | None = None  # directory of the config file, for relative paths

    # -- derived parameter objects --------------------------------------

    def curb_params(self) -> CurbParams:
        c = self.curb
        return CurbParams(
            crop_limit=c.crop_limit,
            ground=self.ground,
            thresholds=CurbThresholds(c.H1, c.H2, c.H3, c.Ts),
            window=WindowParams(c.window_span, c.delta_min, c.delta_max),
            beam=BeamParams(c.beam_bins, c.beam_max_range, math.radians(c.region_halfwidth_deg)),
            gpr=self.gpr,
            boundary_extrapolation=c.boundary_extrapolation,
        )

    def registration(self) -> RegistrationConfig:
        m = self.mapping
        return RegistrationConfig(m.gate, m.max_iterations, m.translation_eps, m.rotation_eps, m.weight_scheme,
                                  m.huber_delta, m.match_labels, m.curb_weight)

    def label_params(self) -> LabelParams:
        return LabelParams(self.mapping.query_radius, self.projection.hull_k, self.projection.curb_tolerance)

    def heuristic(self) -> HeuristicThresholds:
        return HeuristicThresholds(self.review.n_min, self.review.r_max, self.review.s_min)

    def remote(self) -> RemoteConfig | None:
        r = self.review
        if r.mode != "remote":
            return None
        return RemoteConfig(r.endpoint, None, r.timeout, r.instructions, r.fallback, r.max_in_flight)

    def scene_spec(self) -> SceneSpec:
        s = self.synth
        spec = SceneSpec(
            road_width=s.road_width, curb_height=s.curb_height, curvature=s.curvature, length=s.length,
            straight_length=s.straight_length, sidewalk_width=s.sidewalk_width, wall_height=s.wall_height,
            obstacles=parse_boxes(s.obstacles), random_obstacles=s.random_obstacles, seed=s.seed,
            num_frames=s.num_frames, frame_spacing=s.frame_spacing, first_frame_s=s.first_frame_s,
        )
        spec.validate()
        return spec

    def resolve(self, path: str) -> Path:
        p = Path(os.path.expanduser(path))
        if not p.is_absolute() and self.source:
            p = Path(self.source) / p
        return p

    @property
    def input_dir(self) -> Path:
        return self.resolve(self.run.input)

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.run.output)

    @property
    def workers(self) -> int:
        return self.run.workers or (os.cpu_count() or 1)

    # -- identity ---------------------------------------------------------

    def as_dict(self) -> dict:
        return {
            name: dataclasses.asdict(getattr(self, name))
            for name in ("run", "ground", "curb", "gpr", "mapping", "projection", "review", "synth")
        }

    def hash(self) -> str:
        """SHA-256 of the canonical settings (paths as written, not resolved)."""
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def parse_boxes(text: str) -> tuple[Box, ...]:
    boxes = []
    for chunk in text.split(";"):
        vals = chunk.split()
        if not vals:
            continue
        if len(vals) != 6:
            raise ConfigError(f"obstacle {chunk.strip()!r} needs 6 numbers")
        v = [float(x) for x in vals]
        boxes.append(Box(tuple(v[:3]), tuple(v[3:])))
    return tuple(boxes)


_SECTIONS = {
    "run": RunSection,
    "ground": GroundParams,
    "curb": CurbSection,
    "gpr": GprParams,
    "mapping": MappingSection,
    "projection": ProjectionSection,
    "review": ReviewSection,
    "synth": SynthSection,
}


def _convert(raw: str, typ, where: str):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if typ == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ}") from exc


def _section(cls, items: dict, name: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(items) - set(fields))
    if unknown:
        raise ConfigError(f"[{name}] unknown key(s): {', '.join(unknown)}")
    kwargs = {k: _convert(v, fields[k].type, f"[{name}] {k}") for k, v in items.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def parse_config(text: str, source: str | None = None) -> PipelineConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep key case (H1, Ts)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = sorted(set(cp.sections()) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    parts = {name: _section(cls, dict(cp[name]) if cp.has_section(name) else {}, name)
             for name, cls in _SECTIONS.items()}
    cfg = PipelineConfig(**parts, source=source)
    try:
        cfg.curb_params()
        cfg.registration()
        cfg.scene_spec()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: PathLike) -> PipelineConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    return parse_config(p.read_text(), source=str(p.resolve().parent))


def default_config_text() -> str:
    """A complete config with every key at its default value."""
    cfg = PipelineConfig()
    lines = []
    for name, values in cfg.as_dict().items():
        lines.append(f"[{name}]")
        for k, v in values.items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
