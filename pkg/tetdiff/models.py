"""Pydantic v2 models for configuration sections, reports and records."""

from __future__ import annotations

from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# ---------------------------------------------------------------------------
# Config sections
# ---------------------------------------------------------------------------


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class GridConfig(_Section):
    resolution: int = Field(8, ge=2)
    extent: float = Field(1.0, gt=0)
    # deformation bound in cell edges: 0.75 (3x a h/4 base) or 0.375 for fine grids
    deform_multiplier: float = Field(0.75, gt=0)


class FitConfig(_Section):
    learning_rate: float = Field(5e-4, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    iterations: int = Field(500, ge=0)
    samples: int = Field(4096, gt=0)
    sdf_weight_start: float = Field(0.2, gt=0)
    sdf_weight_end: float = Field(0.01, gt=0)
    max_halvings: int = Field(4, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _decay_ends_below_start(self) -> FitConfig:
        if self.sdf_weight_end > self.sdf_weight_start:
            raise ValueError("sdf_weight_end must not exceed sdf_weight_start")
        return self

    def sdf_weight(self, iteration: int) -> float:
        """Linearly decayed SDF-regularizer weight at `iteration`."""
        if self.iterations <= 1:
            return self.sdf_weight_start
        frac = min(max(iteration / (self.iterations - 1), 0.0), 1.0)
        return self.sdf_weight_start + frac * (self.sdf_weight_end - self.sdf_weight_start)


class DiffusionConfig(_Section):
    T: int = Field(1000, ge=2)
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(0.02, gt=0, lt=1)
    sampler: Literal["ddpm", "ddim"] = "ddpm"
    steps: int = Field(100, ge=1)
    spacing: Literal["quadratic", "uniform"] = "quadratic"
    refine: bool = False
    unfreeze_t: int = Field(50, ge=0)
    clip_x0: bool = True


class TrainConfig(_Section):
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(4, gt=0)
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    seed: int = 0
    # global translation jitter, in units of delta_max (capped at 0.1)
    jitter: float = Field(0.05, ge=0, le=0.1)
    widths: tuple[int, ...] = (16, 16)
    kernel: int = Field(3, ge=1)
    time_dim: int = Field(16, ge=2)
    log_every: int = Field(100, gt=0)

    @field_validator("kernel")
    @classmethod
    def _odd_kernel(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError("kernel must be odd")
        return v

    @field_validator("widths", mode="before")
    @classmethod
    def _split_widths(cls, v: object) -> object:
        # config files spell widths as "16,16"
        if isinstance(v, str):
            return tuple(int(w) for w in v.replace("/", ",").split(",") if w.strip())
        return v


class PostprocessConfig(_Section):
    smooth_lambda: float = Field(0.25, ge=0, le=1)
    smooth_steps: int = Field(5, ge=0)
    component_fraction: float = Field(0.05, ge=0, lt=1)


class MetricsConfig(_Section):
    points: int = Field(2048, gt=0)
    jsd_resolution: int = Field(28, gt=0)
    emd_mode: Literal["auto", "exact", "approximate"] = "auto"


class PathsConfig(_Section):
    data_dir: Path = Path("data")
    out_dir: Path = Path("out")
    # defaults to <out_dir>/model.mdck
    checkpoint: Path | None = None

    @property
    def checkpoint_path(self) -> Path:
        return self.checkpoint or self.out_dir / "model.mdck"

    @property
    def dataset_dir(self) -> Path:
        return self.out_dir / "dataset"


class Config(_Section):
    grid: GridConfig = Field(default_factory=GridConfig)
    fit: FitConfig = Field(default_factory=FitConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    postprocess: PostprocessConfig = Field(default_factory=PostprocessConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    seed: int = 0


# ---------------------------------------------------------------------------
# Geometry parameters
# ---------------------------------------------------------------------------


class CameraSpec(BaseModel):
    """Pinhole camera; `focal` is in pixels."""

    model_config = ConfigDict(frozen=True)

    position: tuple[float, float, float] = (0.0, 0.0, 3.0)
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    focal: float = 64.0
    width: int = Field(64, gt=0)
    height: int = Field(64, gt=0)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


class TopologyReport(BaseModel):
    watertight: bool
    euler: int
    component_count: int


class FitReport(BaseModel):
    mesh_id: str = ""
    initial_chamfer: float = Field(ge=0)
    final_chamfer: float = Field(ge=0)
    iterations: int = 0
    # loss on each iteration's samples before / after the accepted step
    chamfer_trace: list[float] = Field(min_length=1)
    accepted_trace: list[float] = Field(default_factory=list)
    halvings: int = 0
    sign_flips: int = 0
    split_votes: int = 0
    sdf_regularizer: float = 0.0
    sdf_weight_schedule: tuple[float, float] = (0.2, 0.01)
    warnings: list[str] = Field(default_factory=list)


class FitRecord(BaseModel):
    """One line of the fitting report file."""

    mesh_id: str
    output: str | None = None
    final_chamfer: float | None = None
    iterations: int = 0
    scale: float = 1.0
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    warnings: list[str] = Field(default_factory=list)
    error: str | None = None


class GradCheckReport(BaseModel):
    passed: bool
    tolerance: float
    max_rel_error: float
    per_layer: dict[str, float] = Field(default_factory=dict)
    failures: list[str] = Field(default_factory=list)


class NetArch(BaseModel):
    """Architecture descriptor stored in checkpoints."""

    data_channels: int = 4
    widths: tuple[int, ...] = (16, 16)
    kernel: int = 3
    time_dim: int = 16
    T: int = 1000
    lattice: int | None = None


class TrainRecord(BaseModel):
    steps: int
    initial_loss: float | None = None
    final_loss: float | None = None
    trace: list[float] = Field(default_factory=list)


class MetricsReport(BaseModel):
    mmd_cd: float = Field(ge=0)
    mmd_emd: float = Field(ge=0)
    cov_cd: float = Field(ge=0, le=1)
    cov_emd: float = Field(ge=0, le=1)
    nna_cd: float = Field(ge=0, le=1)
    nna_emd: float = Field(ge=0, le=1)
    jsd: float = Field(ge=0)
    generated: int
    reference: int
    points: int
    seed: int = 0


class NeighborRecord(BaseModel):
    query: str
    nearest: str
    index: int
    distance: float


class SampleRecord(BaseModel):
    sample_id: str
    seed: int
    output: str | None = None
    faces: int = 0
    watertight: bool = False
    error: str | None = None
