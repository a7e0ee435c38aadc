"""Pipeline configuration: a flat ``key=value`` file with ``#`` comments.

Every tunable has a default; :func:`format_config` writes all of them and
:func:`parse_config` reads them back losslessly (floats use ``repr``).
Environment variables ``DENSEMONO_<KEY>`` override file values.
"""
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError, MissingFile
from .keyframes import KeyframePolicy
from .refinement import StereoConfig
from .tracking import TrackingConfig

ENV_PREFIX = "DENSEMONO_"


@dataclass(frozen=True)
class PipelineConfig:
    # dataset
    dataset: str = ""
    associations: str = "associations.txt"
    camera: str = ""
    max_frames: int = 0
    # predictions: a directory of .f32/.png maps, or degraded ground truth
    prediction_dir: str = ""
    f_train: float = 0.0
    synth_blur: float = 3.0
    synth_bias: float = 1.0
    synth_noise: float = 0.0
    seed: int = 0
    # tracking
    gradient_threshold: float = 0.02
    sigma_photometric: float = 0.03
    huber_delta: float = 3.0
    pyramid_levels: int = 3
    max_iterations: int = 20
    convergence_eps: float = 1e-6
    min_valid_ratio: float = 0.2
    depth_edge_threshold: float = 0.05
    depth_edge_radius: int = 4
    restart_energy: float = 0.1
    restart_rotation_deg: float = 2.0
    # key-frames
    keyframe_translation_ratio: float = 0.15
    keyframe_max_rotation_deg: float = 10.0
    sigma_p2: float = 0.01
    u_max: float = 4.0
    propagation_exponent: float = 1.0
    # refinement
    refinement: bool = True
    stereo_min_depth: float = 0.1
    stereo_max_depth: float = 10.0
    stereo_range_sigmas: float = 2.0
    stereo_min_baseline_ratio: float = 0.001
    ambiguity_ratio: float = 0.9
    gradient_floor: float = 1e-4
    # pose graph
    fov_threshold: float = 0.3
    sigma_edge_translation: float = 0.01
    sigma_edge_rotation: float = 0.01
    loop_alignment: bool = True
    # global model and outputs
    build_model: bool = True
    normal_angle_deg: float = 30.0
    output: str = "run"
    dump_generations: bool = False

    def tracking(self) -> TrackingConfig:
        return TrackingConfig(
            gradient_threshold=self.gradient_threshold,
            sigma_photometric=self.sigma_photometric,
            huber_delta=self.huber_delta,
            pyramid_levels=self.pyramid_levels,
            max_iterations=self.max_iterations,
            convergence_eps=self.convergence_eps,
            min_valid_ratio=self.min_valid_ratio,
            depth_edge_threshold=self.depth_edge_threshold,
            depth_edge_radius=self.depth_edge_radius,
            restart_energy=self.restart_energy,
            restart_rotation_deg=self.restart_rotation_deg,
        )

    def stereo(self) -> StereoConfig:
        return StereoConfig(
            sigma_photometric=self.sigma_photometric,
            min_depth=self.stereo_min_depth,
            max_depth=self.stereo_max_depth,
            range_sigmas=self.stereo_range_sigmas,
            min_baseline_ratio=self.stereo_min_baseline_ratio,
            ambiguity_ratio=self.ambiguity_ratio,
            gradient_floor=self.gradient_floor,
        )

    def policy_for(self, kf) -> KeyframePolicy:
        return KeyframePolicy.for_keyframe(kf, self.keyframe_translation_ratio, self.keyframe_max_rotation_deg)


_FIELDS = {f.name: f for f in fields(PipelineConfig)}
_DEFAULTS = asdict(PipelineConfig())


def _convert(key: str, text: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = type(_DEFAULTS[key])
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: PipelineConfig) -> str:
    lines = ["# densemono pipeline configuration"]
    for name in _FIELDS:
        lines.append(f"{name}={_format_value(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    values = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value")
        key, value = line.split("=", 1)
        key = key.strip()
        values[key] = _convert(key, value)
    return replace(base or PipelineConfig(), **values)


def apply_env(cfg: PipelineConfig, environ) -> PipelineConfig:
    """Override fields from ``DENSEMONO_<KEY>`` variables (key upper-cased)."""
    values = {}
    for name in _FIELDS:
        env = ENV_PREFIX + name.upper()
        if env in environ:
            values[name] = _convert(name, environ[env])
    return replace(cfg, **values) if values else cfg


def load_config(path, environ=None) -> PipelineConfig:
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"{p}: config file not found")
    cfg = parse_config(p.read_text(encoding="utf-8"))
    # relative dataset paths are taken relative to the config file
    updates = {}
    for key in ("dataset", "prediction_dir", "output", "camera"):
        val = getattr(cfg, key)
        if val and not Path(val).is_absolute():
            updates[key] = str((p.parent / val).resolve())
    cfg = replace(cfg, **updates)
    return apply_env(cfg, environ or {})


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(format_config(cfg), encoding="utf-8")
