"""Plain-text ``key = value`` run configuration with command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from mlcam.ablation import MODES, parse_variants
from mlcam.data import FEATURE_SCALES, SynthConfig
from mlcam.errors import ConfigError, MLCAMError
from mlcam.fusion import resolve_threshold
from mlcam.network import HEADS, NetworkConfig
from mlcam.trainer import TrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    data: str = ""
    # synthesis
    image_size: int = 64
    n_groups: int = 20
    images_per_group: int = 30
    features: str = "intermediate"
    texture_noise: float = 0.06
    distractor_density: float = 2.0
    blob_contrast: float = 0.45
    # split
    fractions: str = "0.6,0.2,0.2"
    # network
    head: str = "mlcam"
    stem_channels: int = 8
    inception_channels: str = "4,4,4/4,4,4/4,4,4"
    # training
    base_lr: float = 0.001
    momentum: float = 0.9
    gamma: float = 0.9
    step_size: int = 500
    batch_size: int = 15
    max_iterations: int = 1000
    val_every: int = 100
    # evaluation
    mode: str = "intermediate"
    modes: str = "intermediate,restrictive"
    threshold: float | None = None
    variants: str = "M1,M2,M3,M4,M5,M6,M7,M8,M9,M10"
    subset: str = "test"
    subsets: str = "train,val,test"
    labels: str = "D"
    checkpoint: str = ""
    checkpoint_mlgap: str = ""
    checkpoint_cam: str = ""
    image: str = ""

    # derived views ---------------------------------------------------------
    def fraction_tuple(self) -> tuple[float, float, float]:
        parts = [p.strip() for p in self.fractions.split(",")]
        vals = tuple(float(p) for p in parts)
        if len(vals) != 3 or min(vals) < 0 or abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError(f"expected three non-negative fractions summing to 1, got {self.fractions!r}")
        return vals

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            image_size=self.image_size,
            n_groups=self.n_groups,
            images_per_group=self.images_per_group,
            feature_scale=self.features,
            texture_noise=self.texture_noise,
            distractor_density=self.distractor_density,
            blob_contrast=self.blob_contrast,
            seed=self.seed,
        )

    def network_config(self, head: str | None = None) -> NetworkConfig:
        blocks = tuple(tuple(int(c) for c in b.split(",")) for b in self.inception_channels.split("/"))
        return NetworkConfig(
            input_size=(self.image_size, self.image_size),
            stem_channels=self.stem_channels,
            inception_channels=blocks,
            head=head or self.head,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            base_lr=self.base_lr,
            momentum=self.momentum,
            gamma=self.gamma,
            step_size=self.step_size,
            batch_size=self.batch_size,
            max_iterations=self.max_iterations,
            val_every=self.val_every,
            seed=self.seed,
        )

    def variant_list(self) -> list[str]:
        return parse_variants(self.variants)

    def mode_list(self) -> list[str]:
        modes = [v.strip() for v in self.modes.split(",") if v.strip()]
        if not modes or any(m not in MODES for m in modes):
            raise ValueError(f"modes must be a comma list of {'/'.join(MODES)}, got {self.modes!r}")
        return modes

    def label_list(self) -> list[str]:
        labels = [v.strip() for v in self.labels.split(",") if v.strip()]
        if not labels or any(v not in ("D", "ND") for v in labels):
            raise ValueError(f"labels must be a comma list of D/ND, got {self.labels!r}")
        return labels

    def subset_list(self) -> list[str]:
        items = [v.strip() for v in self.subsets.split(",") if v.strip()]
        for v in items + [self.subset]:
            if v not in ("train", "val", "test", "all"):
                raise ValueError(f"unknown subset {v!r}")
        return items

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if value is None else value}")
        return "\n".join(lines) + "\n"


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
# field -> flag that sets it, for error messages
FLAG_NAMES = {name: "--" + name.replace("_", "-") for name in FIELD_TYPES}


def _convert(name: str, raw: str):
    kind = FIELD_TYPES[name]
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "float | None":
        return None if raw in ("", "none", "None") else float(raw)
    return raw


def read_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def build_config(file_values: dict[str, str], overrides: dict[str, str]) -> RunConfig:
    """Merge file values and flag overrides, convert, and validate every field."""
    cfg = RunConfig()
    for source, values in (("config", file_values), ("flag", overrides)):
        for key, raw in values.items():
            if key not in FIELD_TYPES:
                raise ConfigError(f"unknown key {key!r}")
            try:
                setattr(cfg, key, _convert(key, str(raw)))
            except ValueError:
                where = FLAG_NAMES[key] if source == "flag" else f"config key {key!r}"
                raise ConfigError(f"{where}: cannot parse {raw!r} as {FIELD_TYPES[key]}") from None
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    checks = [
        ("fractions", cfg.fraction_tuple),
        ("features", lambda: FEATURE_SCALES[cfg.features]),
        ("head", lambda: HEADS.index(cfg.head)),
        ("mode", lambda: MODES.index(cfg.mode)),
        ("threshold", lambda: resolve_threshold(cfg.mode, cfg.threshold)),
        ("modes", cfg.mode_list),
        ("variants", cfg.variant_list),
        ("labels", cfg.label_list),
        ("subsets", cfg.subset_list),
        ("image_size", cfg.synth_config),
        ("inception_channels", cfg.network_config),
        ("max_iterations", cfg.train_config),
    ]
    for key, check in checks:
        try:
            check()
        except (ValueError, KeyError, MLCAMError) as exc:
            detail = str(exc.args[0] if exc.args else exc)
            # sub-config messages start with the offending field name
            first = detail.split(" ", 1)[0]
            if first in FLAG_NAMES:
                key = first
            raise ConfigError(f"{FLAG_NAMES[key]}: {detail}") from None


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)
