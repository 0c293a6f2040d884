"""Experiment configuration: flat ``key = value`` text files."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from mgi.images import BUILTIN
from mgi.optics import PhysicalParams
from mgi.reduction import ReductionConfig


class ConfigError(ValueError):
    pass


_BOOL = {"true": True, "yes": True, "1": True, "on": True,
         "false": False, "no": False, "0": False, "off": False}


@dataclass(frozen=True)
class ExperimentConfig:
    # physical parameters
    k1: float = 6.0e4
    k3: float = 1.7e5
    beta: float = 10.0
    coupling_ratio: float = 0.4
    zeta: float = 6.0
    focal_length: float = 10.0
    grid: tuple[int, int] = (64, 64)
    pixel_pitch: float = 1.0e-3
    n_frames: int = 10_000
    # acquisition
    object: str = BUILTIN
    out_dir: str = "out"
    seed: int = 0
    noise: bool = True
    white_noise: float = 0.0
    detectors: str = "ideal"
    covariance: str = "auto"
    # reduction
    kappa: float | None = None
    pinv_tol: float = 1e-10
    max_iters: int = 20
    conv_tol: float = 1e-4
    init_level: float = 1.0
    # outputs
    emit_ghost: bool = True
    emit_sum: bool = True
    emit_reduced: bool = True
    emit_report: bool = True

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.covariance not in ("auto", "dense", "structured", "blockdiag"):
            raise ConfigError(f"covariance must be auto|dense|structured|blockdiag, got {self.covariance!r}")
        if self.detector_binning is None:
            raise ConfigError(f"detectors must be 'ideal' or 'binK', got {self.detectors!r}")
        if self.white_noise < 0:
            raise ConfigError("white_noise must be non-negative")
        try:
            self.physical_params()
            self.reduction_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        k = self.detector_binning
        if k > 1 and (self.grid[0] % k or self.grid[1] % k):
            raise ConfigError(f"grid {self.grid} not divisible by detector binning {k}")

    @property
    def detector_binning(self) -> int | None:
        if self.detectors == "ideal":
            return 1
        if self.detectors.startswith("bin") and self.detectors[3:].isdigit() and int(self.detectors[3:]) >= 1:
            return int(self.detectors[3:])
        return None

    def physical_params(self) -> PhysicalParams:
        return PhysicalParams(k1=self.k1, k3=self.k3, beta=self.beta,
                              coupling_ratio=self.coupling_ratio, zeta=self.zeta,
                              focal_length=self.focal_length, grid=self.grid,
                              pixel_pitch=self.pixel_pitch, n_frames=self.n_frames)

    def reduction_config(self) -> ReductionConfig:
        return ReductionConfig(kappa=self.kappa, pinv_tol=self.pinv_tol, max_iters=self.max_iters,
                               conv_tol=self.conv_tol, init_level=self.init_level)

    def covariance_mode(self) -> str:
        if self.covariance != "auto":
            return self.covariance
        if self.detector_binning != 1 or self.grid[0] * self.grid[1] <= 256:
            return "dense"
        return "structured"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["grid"] = f"{self.grid[0]}x{self.grid[1]}"
        return d

    def fingerprint(self) -> str:
        """SHA-256 of every setting except the output directory."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        try:
            return dataclasses.replace(self, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def parse_grid(text: str) -> tuple[int, int]:
    parts = text.lower().replace(" ", "").split("x")
    try:
        rows, cols = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"grid must look like ROWSxCOLS, got {text!r}") from None
    if rows < 1 or cols < 1:
        raise ConfigError(f"grid dimensions must be positive, got {text!r}")
    return rows, cols


def _convert(key: str, raw: str, field_type):
    raw = raw.strip()
    if key == "grid":
        return parse_grid(raw)
    if key == "kappa":
        return None if raw.lower() in ("auto", "none", "") else float(raw)
    if field_type in (bool, "bool"):
        try:
            return _BOOL[raw.lower()]
        except KeyError:
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}") from None
    if field_type in (int, "int"):
        value = float(raw) if any(ch in raw for ch in ".eE") else int(raw, 0)
        if value != int(value):
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
        return int(value)
    if field_type in (float, "float"):
        return float(raw)
    return raw


def parse_config_text(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    types = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw, types[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {key}: {exc}") from None
    obj = values.get("object")
    if base_dir is not None and obj and obj != BUILTIN and not Path(obj).is_absolute():
        values["object"] = str(base_dir / obj)
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, path.parent)
