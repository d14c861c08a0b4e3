"""Flat key=value run configuration.

Every knob has a default; a config file only has to name the directories.
Unknown keys are an error rather than a warning, because a typo like
`crop_margn` silently running with the default is exactly the failure mode
a batch pipeline cannot afford.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError


@dataclass
class PipelineConfig:
    input_dir: str = ""
    output_dir: str = ""
    template_dir: str = ""
    age_sidecar: str = ""          # defaults to <input_dir>/ages.txt when blank
    bone_threshold_hu: float = 300.0
    crop_margin: int = 5
    target_height: int = 500
    target_width: int = 400
    hu_window_max: float = 100.0
    split_review_threshold: int = 25
    localiser_slice_threshold: int = 3
    age_cutoff: int = 72
    default_when_age_missing: str = "older"
    bone_kernel_tokens: str = "BONE,BONEPLUS,H60S,H70H"
    gmm_k_min: int = 1
    gmm_k_max: int = 6
    gmm_seed: int = 0
    parallelism: int = 1

    @property
    def bone_tokens(self) -> frozenset[str]:
        return frozenset(
            t.strip().upper() for t in self.bone_kernel_tokens.split(",") if t.strip()
        )

    @property
    def sidecar_path(self) -> Path:
        if self.age_sidecar:
            return Path(self.age_sidecar)
        return Path(self.input_dir) / "ages.txt"

    def validate_for_run(self) -> None:
        """Checks that only matter once the pipeline actually runs."""
        if not self.input_dir:
            raise ConfigError("input_dir is not set")
        if not Path(self.input_dir).is_dir():
            raise ConfigError(f"input_dir {self.input_dir!r} is not a directory")
        if not self.output_dir:
            raise ConfigError("output_dir is not set")
        # template_dir is checked lazily, at the registration stage: a run
        # whose scans never get that far (or an empty input dir) must not
        # demand templates.
        if self.default_when_age_missing not in ("younger", "older"):
            raise ConfigError(
                "default_when_age_missing must be 'younger' or 'older'"
            )
        if self.gmm_k_min < 1 or self.gmm_k_max < self.gmm_k_min:
            raise ConfigError("gmm k range is empty or non-positive")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be at least 1")
        for name in ("bone_threshold_hu", "hu_window_max"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("target_height", "target_width",
                     "split_review_threshold", "localiser_slice_threshold"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.crop_margin < 0:
            raise ConfigError("crop_margin must be non-negative")


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def parse_config_text(text: str, source: str = "<config>") -> PipelineConfig:
    cfg = PipelineConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        kind = _FIELD_TYPES[key]
        try:
            if kind in ("int", int):
                parsed = int(value)
            elif kind in ("float", float):
                parsed = float(value)
            else:
                parsed = value
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}")
        setattr(cfg, key, parsed)
    return cfg


def load_config(path) -> PipelineConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config_text(p.read_text(), source=str(p))


def config_text(cfg: PipelineConfig) -> str:
    """Render a config back to file form (used by synth to emit a ready run)."""
    lines = []
    for f in fields(PipelineConfig):
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"
