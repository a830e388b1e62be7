"""Pipeline settings.

Defaults are kept in two places: the dictionaries below
(which also fix each value's type) and ``defaults.ini`` next to this file, which
the team edits without touching Python. A run may add a user file in the flat
``section.key = value`` grammar and command-line overrides on top:

    code defaults  <  defaults.ini  <  --config file  <  CLI flags

The merged values are frozen into one dataclass per concern. ``Settings.flat()``
returns the ``section.key -> value`` view that gets echoed into every bundle.
"""

from __future__ import annotations

from configparser import ConfigParser
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from services.errors import UsageError

_DEFAULTS_FILE = Path(__file__).with_name("defaults.ini")

_DEFAULT_EM = {
    "lambda_c": 0.1,
    "lambda_s": 1.0,
    "lambda_d": 1.0,
    "lambda_m": 0.05,
    "sigma_d": 1.0,
    "delta": 0.1,
    "n_clusters": 0,          # 0 -> 2 * |T|
    "batch_shapes": 50,
    "pairs_per_batch": 20000,
    "epochs": 30,
    "eta": 0.5,
    "e_step_passes": 5,
    "epsilon": 1e-6,
    "m_step_iters": 5,
    "monitor_parts": 200,
}

_DEFAULT_ADAM = {
    "lr": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
}

_DEFAULT_FEATURES = {
    "samples": 10000,
    "neighbors": 50,
    "part_samples": 2000,
    "grid": 30,
    "render_size": 64,
}

_DEFAULT_CLASSIFIER = {
    "epochs": 50,
    "batch_size": 256,
    "lr": 1e-3,
    "area_weighted_cc": False,
}

_DEFAULT_SEGMENTATION = {
    "granularity": "component",
    "lambda": 1.0,
    "kappa1": 5.0,
    "kappa2": 2.5,
    "knn_cap": 30,
    "knn_fraction": 0.01,
    "edge_bonus": 10.0,
    "lambda_grid": (0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0),
    "xval_folds": 5,
}

_DEFAULT_SYNTH = {
    "template": "vehicle",
    "count": 250,
    "tag_drop": 0.3,
    "tag_coarsen": 0.1,
    "tag_error": 0.02,
    "train_fraction": 0.7,
    "validation_fraction": 0.1,
}

_DEFAULT_TAGS = {
    "fuzzy_threshold": None,
}

_DEFAULT_RUN = {
    "seed": 7,
    "jobs": 1,
    "progress": False,
}

_SECTIONS: dict[str, Mapping[str, Any]] = {
    "em": _DEFAULT_EM,
    "adam": _DEFAULT_ADAM,
    "features": _DEFAULT_FEATURES,
    "classifier": _DEFAULT_CLASSIFIER,
    "segmentation": _DEFAULT_SEGMENTATION,
    "synth": _DEFAULT_SYNTH,
    "tags": _DEFAULT_TAGS,
    "run": _DEFAULT_RUN,
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


# ---------- parsing helpers ----------

def _coerce(raw: Any, default: Any, key: str) -> Any:
    """Parse ``raw`` into the type of ``default``."""
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(",") if v.strip())
        if default is None:
            return int(text) if text else None
    except ValueError as exc:
        raise UsageError(f"Bad value for {key!r}: {raw!r}") from exc
    return text


def _read_config(path: Path, flat: bool = False) -> ConfigParser:
    parser = ConfigParser(
        interpolation=None,
        comment_prefixes=("#", ";"),
        inline_comment_prefixes=(),
        strict=False,
    )
    parser.optionxform = str  # keep key case
    if not path.exists():
        if flat:
            raise UsageError(f"Config file not found: {path}")
        return parser
    text = path.read_text(encoding="utf-8")
    if flat:
        text = "[__flat__]\n" + text
    parser.read_string(text, source=str(path))
    return parser


def _merge_section(parser: ConfigParser, section: str, defaults: Mapping[str, Any]) -> dict[str, Any]:
    values = dict(defaults)
    if parser.has_section(section):
        for key, value in parser.items(section):
            if key not in defaults:
                raise UsageError(f"Unknown setting {section}.{key}")
            values[key] = _coerce(value, defaults[key], f"{section}.{key}")
    return values


def parse_flat_file(path: str | Path) -> dict[str, str]:
    """Read a user config in the flat ``section.key = value`` grammar."""
    parser = _read_config(Path(path), flat=True)
    out: dict[str, str] = {}
    for key, value in parser.items("__flat__"):
        if "." not in key:
            raise UsageError(f"Config keys must look like section.key, got {key!r}")
        out[key] = value
    return out


# ---------- typed views ----------

@dataclass(frozen=True)
class EmConfig:
    lambda_c: float = 0.1
    lambda_s: float = 1.0
    lambda_d: float = 1.0
    lambda_m: float = 0.05
    sigma_d: float = 1.0
    delta: float = 0.1
    n_clusters: int = 0
    batch_shapes: int = 50
    pairs_per_batch: int = 20000
    epochs: int = 30
    eta: float = 0.5
    e_step_passes: int = 5
    epsilon: float = 1e-6
    m_step_iters: int = 5
    monitor_parts: int = 200
    seed: int = 7
    progress: bool = False

    def __post_init__(self) -> None:
        if min(self.lambda_c, self.lambda_s, self.lambda_d, self.lambda_m) < 0:
            raise UsageError("EM weights must be nonnegative")
        if self.sigma_d <= 0:
            raise UsageError("em.sigma_d must be positive")

    def clusters_for(self, n_tags: int) -> int:
        return self.n_clusters if self.n_clusters > 0 else max(2 * n_tags, 1)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class FeatureConfig:
    samples: int = 10000
    neighbors: int = 50
    part_samples: int = 2000
    grid: int = 30
    render_size: int = 64
    seed: int = 7


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    area_weighted_cc: bool = False
    seed: int = 7
    progress: bool = False


@dataclass(frozen=True)
class SegConfig:
    granularity: str = "component"
    lam: float = 1.0
    kappa1: float = 5.0
    kappa2: float = 2.5
    knn_cap: int = 30
    knn_fraction: float = 0.01
    edge_bonus: float = 10.0
    lambda_grid: tuple[float, ...] = (0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0)
    xval_folds: int = 5

    def __post_init__(self) -> None:
        if self.granularity not in ("component", "face"):
            raise UsageError(f"granularity must be component or face, got {self.granularity!r}")


@dataclass(frozen=True)
class SynthSpec:
    template: str = "vehicle"
    count: int = 250
    tag_drop: float = 0.3
    tag_coarsen: float = 0.1
    tag_error: float = 0.02
    train_fraction: float = 0.7
    validation_fraction: float = 0.1
    seed: int = 7

    def __post_init__(self) -> None:
        for name in ("tag_drop", "tag_coarsen", "tag_error", "train_fraction", "validation_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise UsageError(f"synth.{name} must be in [0, 1], got {value}")
        if self.train_fraction + self.validation_fraction > 1.0:
            raise UsageError("synth train + validation fractions exceed 1")


@dataclass(frozen=True)
class Settings:
    em: EmConfig = field(default_factory=EmConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    seg: SegConfig = field(default_factory=SegConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    fuzzy_threshold: Optional[int] = None
    seed: int = 7
    jobs: int = 1
    progress: bool = False
    raw: Mapping[str, Mapping[str, Any]] = field(default_factory=dict, compare=False)

    def flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for section, values in self.raw.items():
            for key, value in values.items():
                out[f"{section}.{key}"] = list(value) if isinstance(value, tuple) else value
        return out


def _pick(cls, values: Mapping[str, Any], **extra: Any):
    names = {f.name for f in fields(cls)}
    kwargs = {k: v for k, v in values.items() if k in names}
    kwargs.update({k: v for k, v in extra.items() if k in names})
    return cls(**kwargs)


def load_settings(
    config_path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> Settings:
    """Merge code defaults, ``defaults.ini``, a flat user file and overrides."""
    parser = _read_config(_DEFAULTS_FILE)
    merged = {name: _merge_section(parser, name, defaults) for name, defaults in _SECTIONS.items()}

    layered: dict[str, Any] = {}
    if config_path is not None:
        layered.update(parse_flat_file(config_path))
    if overrides:
        layered.update({k: v for k, v in overrides.items() if v is not None})

    for key, value in layered.items():
        section, _, name = key.partition(".")
        if section not in merged or name not in merged[section]:
            raise UsageError(f"Unknown setting {key}")
        default = _SECTIONS[section][name]
        merged[section][name] = _coerce(value, default, key)

    run = merged["run"]
    seed, progress = int(run["seed"]), bool(run["progress"])
    seg = dict(merged["segmentation"])
    seg["lam"] = seg.pop("lambda")
    return Settings(
        em=_pick(EmConfig, merged["em"], seed=seed, progress=progress),
        adam=_pick(AdamConfig, merged["adam"]),
        features=_pick(FeatureConfig, merged["features"], seed=seed),
        classifier=_pick(ClassifierConfig, merged["classifier"], seed=seed, progress=progress),
        seg=_pick(SegConfig, seg),
        synth=_pick(SynthSpec, merged["synth"], seed=seed),
        fuzzy_threshold=merged["tags"]["fuzzy_threshold"],
        seed=seed,
        jobs=int(run["jobs"]),
        progress=progress,
        raw=merged,
    )


__all__ = [
    "AdamConfig",
    "ClassifierConfig",
    "EmConfig",
    "FeatureConfig",
    "SegConfig",
    "Settings",
    "SynthSpec",
    "load_settings",
    "parse_flat_file",
]
