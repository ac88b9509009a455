"""Plain-text run configuration.

Grammar: one `section.key = value` per line, `#` comments, blank lines
ignored. Sections: scene, train, loss, model. Keys are the dataclass
field names; unknown keys are errors naming the key and line. The same
`section.key=value` strings can be passed as command-line overrides,
which win over the file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .losses import LossConfig
from .networks import ModelConfig
from .synthscene import SceneSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


# component presets mirroring the incremental ablation structure
PRESETS = {
    "baseline": ["model.ifg_mode=none", "model.use_ffg=false", "model.use_tape=false"],
    "ffg": ["model.ifg_mode=none", "model.use_ffg=true", "model.use_tape=false"],
    "ifg": ["model.ifg_mode=fixture", "model.use_ffg=false", "model.use_tape=false"],
    "f2fpe": ["model.ifg_mode=fixture", "model.use_ffg=true", "model.use_tape=false"],
    "full": ["model.ifg_mode=fixture", "model.use_ffg=true", "model.use_tape=true"],
}


def preset_overrides(name: str) -> list[str]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return list(PRESETS[name])


_SECTIONS = {"scene": SceneSpec, "train": TrainConfig, "loss": LossConfig,
             "model": ModelConfig}
_SKIP_FIELDS = {("train", "loss")}


def _parse_octaves(raw: str):
    """'5:0.5,2.5:0.3' -> ((5.0, 0.5), (2.5, 0.3))"""
    octs = []
    for part in raw.split(","):
        if ":" not in part:
            raise ValueError(f"octave {part!r} must be wavelength:amplitude")
        wl, amp = part.split(":", 1)
        octs.append((float(wl), float(amp)))
    return tuple(octs)


_CUSTOM_PARSERS = {("scene", "texture_octaves"): _parse_octaves}


def _field_types():
    table = {}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            if (section, f.name) in _SKIP_FIELDS:
                continue
            table[(section, f.name)] = f.type
    return table


_FIELDS = _field_types()


def _convert(section: str, key: str, raw: str, where: str):
    custom = _CUSTOM_PARSERS.get((section, key))
    ftype = _FIELDS[(section, key)]
    raw = raw.strip()
    try:
        if custom is not None:
            return custom(raw)
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        if ftype in ("bool", bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {section}.{key}: {exc}") from None


@dataclass
class RunConfig:
    scene: SceneSpec
    train: TrainConfig
    model: ModelConfig

    @property
    def loss(self) -> LossConfig:
        return self.train.loss


def _parse_line(line: str, where: str) -> tuple[str, str, str] | None:
    stripped = line.strip()
    if not stripped or stripped.startswith("#"):
        return None
    if "=" not in stripped:
        raise ConfigError(f"{where}: expected 'section.key = value', got {stripped!r}")
    lhs, _, raw = stripped.partition("=")
    lhs = lhs.strip()
    if "." not in lhs:
        raise ConfigError(f"{where}: key {lhs!r} must be section.key")
    section, _, key = lhs.partition(".")
    if section not in _SECTIONS:
        raise ConfigError(f"{where}: unknown section {section!r} "
                          f"(expected one of {sorted(_SECTIONS)})")
    if (section, key) not in _FIELDS:
        raise ConfigError(f"{where}: unknown key {section}.{key}")
    return section, key, raw


def load_run_config(path: str | None = None,
                    overrides: list[str] | None = None) -> RunConfig:
    values: dict[str, dict] = {s: {} for s in _SECTIONS}
    if path is not None:
        with open(path) as f:
            for lineno, line in enumerate(f, start=1):
                parsed = _parse_line(line, f"{path}:{lineno}")
                if parsed is None:
                    continue
                section, key, raw = parsed
                values[section][key] = _convert(section, key, raw, f"{path}:{lineno}")
    for i, item in enumerate(overrides or []):
        parsed = _parse_line(item, f"--set[{i}]")
        if parsed is None:
            raise ConfigError(f"--set[{i}]: empty assignment")
        section, key, raw = parsed
        values[section][key] = _convert(section, key, raw, f"--set[{i}]")

    try:
        scene = SceneSpec(**values["scene"])
        loss = LossConfig(**values["loss"])
        train = TrainConfig(loss=loss, **values["train"])
        model = ModelConfig(**values["model"])
    except Exception as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return RunConfig(scene=scene, train=train, model=model)


def describe_keys() -> str:
    """Human-readable list of every addressable key with its default."""
    lines = []
    for section, cls in _SECTIONS.items():
        inst = cls()
        for f in dataclasses.fields(cls):
            if (section, f.name) in _SKIP_FIELDS:
                continue
            lines.append(f"{section}.{f.name} = {getattr(inst, f.name)}")
    return "\n".join(lines)
