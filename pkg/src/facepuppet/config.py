"""Pipeline configuration: one flat dataclass, key = value files, CLI overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .core import IngestError, ValidationError
from .denoise import DenoiseParams
from .flow import DENSE_WARP_ALPHA, FlowParams
from .texture import AlignParams, BlendParams

PATH_KEYS = ("puppet", "driver", "frames", "out", "template_mesh", "template_fiducials", "puppet_mesh",
             "driver_mesh", "target", "reference", "correspondence", "driver_images")


@dataclass
class PipelineConfig:
    # paths
    puppet: Optional[str] = None  # puppet photo collection directory
    driver: Optional[str] = None  # driver photo collection directory
    frames: Optional[str] = None  # driver frame meshes (*.pfmesh)
    out: Optional[str] = None
    template_mesh: Optional[str] = None  # default: packaged template
    template_fiducials: Optional[str] = None
    puppet_mesh: Optional[str] = None  # puppet average (base) mesh
    driver_mesh: Optional[str] = None  # driver average mesh; default: mean of the frames
    target: Optional[str] = None  # target fiducial CSV (canonical grid)
    reference: Optional[str] = None  # reference photo (PNG with sibling CSV)
    correspondence: Optional[str] = None  # directory with forward/inverse fields
    driver_images: Optional[str] = None  # frontal driver frames for the 2.5D mode
    # geometry / texture
    tps_lambda: float = 10.0
    sigma: float = 10.0
    blend_alpha: float = 1.0
    beta: float = 20.0
    tau: float = 1.0
    levels: int = 0  # 0 = automatic pyramid depth
    rank: int = 4
    dense_alpha: float = DENSE_WARP_ALPHA
    # flow
    flow_alpha: float = 0.02
    flow_ratio: float = 0.85
    flow_min_width: int = 20
    flow_outer: int = 4
    flow_inner: int = 1
    flow_sor: int = 40
    corr_rounds: int = 3
    # denoising / transfer
    tv_weight: float = 1.0
    huber_eps: float = 0.05
    denoise_iters: int = 300
    subvertex: bool = True
    # modes
    texture_mode: str = "neutral"  # neutral | per-frame
    hold_out: bool = False
    baselines: bool = False
    preview: bool = True
    debug_weights: bool = False
    threads: int = 1

    # -- derived parameter objects --------------------------------------
    def flow_params(self) -> FlowParams:
        return FlowParams(self.flow_alpha, self.flow_ratio, self.flow_min_width, self.flow_outer,
                          self.flow_inner, self.flow_sor)

    def dense_flow_params(self) -> FlowParams:
        return dataclasses.replace(self.flow_params(), alpha=self.dense_alpha)

    def blend_params(self) -> BlendParams:
        return BlendParams(self.sigma, self.blend_alpha, self.beta, self.tau, self.levels or None)

    def align_params(self) -> AlignParams:
        return AlignParams(self.tps_lambda, self.dense_flow_params(), self.rank)

    def denoise_params(self) -> DenoiseParams:
        return DenoiseParams(self.tv_weight, self.huber_eps, self.denoise_iters)

    def validate(self) -> "PipelineConfig":
        """Knob ranges (raises ValidationError); paths are checked by each command."""
        self.flow_params()
        self.dense_flow_params()
        self.blend_params()
        self.align_params()
        self.denoise_params()
        if self.texture_mode not in ("neutral", "per-frame"):
            raise ValidationError(f"texture_mode must be 'neutral' or 'per-frame', got {self.texture_mode!r}")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")
        if self.levels < 0:
            raise ValidationError("levels must be >= 0")
        if self.corr_rounds < 0:
            raise ValidationError("corr_rounds must be >= 0")
        return self

    def echo(self) -> dict:
        return dataclasses.asdict(self)


FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _convert(key: str, raw: str):
    kind = FIELD_TYPES[key]
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"{key}: not a boolean: {raw!r}")
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ValidationError(f"{key}: not an integer: {raw!r}") from None
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ValidationError(f"{key}: not a number: {raw!r}") from None
    return raw.strip()


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines (``#`` comments); relative paths resolve against the file."""
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"{path}: config file not found")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELD_TYPES:
            raise ValidationError(f"{path}:{n}: unknown key {key!r}")
        value = _convert(key, value)
        if key in PATH_KEYS and value and not Path(value).is_absolute():
            value = str(path.parent / value)
        out[key] = value
    return out


def build_config(file_values: Optional[dict] = None, cli_values: Optional[dict] = None) -> PipelineConfig:
    """Defaults, then the file, then explicit command-line values (None = not given)."""
    merged = {}
    merged.update(file_values or {})
    merged.update({k: v for k, v in (cli_values or {}).items() if v is not None})
    unknown = set(merged) - set(FIELD_TYPES)
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    return PipelineConfig(**merged).validate()


def write_config(config: PipelineConfig, path) -> None:
    lines = [f"{k} = {'' if v is None else v}" for k, v in config.echo().items() if v is not None]
    Path(path).write_text("\n".join(lines) + "\n")
