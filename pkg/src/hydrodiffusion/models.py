"""Pydantic configuration models and the LangGraph pipeline state schema."""

from __future__ import annotations

from datetime import date
from enum import Enum
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing_extensions import TypedDict


class _Section(BaseModel):
    """Base for every config section: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)


# ---------------------------------------------------------------------------
# Model kinds
# ---------------------------------------------------------------------------


class ModelKind(str, Enum):
    """Trainable model kinds."""

    HYDRODIFFUSION = "hydrodiffusion"
    DIFFUSION_LSTM_ENCDEC = "diffusion_lstm_encdec"
    DIFFUSION_LSTM_DEC = "diffusion_lstm_dec"
    DETERMINISTIC_SSM = "deterministic_ssm"
    DETERMINISTIC_LSTM = "deterministic_lstm"

    @property
    def is_diffusion(self) -> bool:
        return self in (
            ModelKind.HYDRODIFFUSION,
            ModelKind.DIFFUSION_LSTM_ENCDEC,
            ModelKind.DIFFUSION_LSTM_DEC,
        )


# ---------------------------------------------------------------------------
# Backbones
# ---------------------------------------------------------------------------


class BackboneConfig(_Section):
    """S4D-FT backbone sizes plus the shared window geometry."""

    d_model: int = Field(default=256, gt=0, description="Channels per S4D-FT layer (H).")
    d_state: int = Field(default=256, gt=0, description="Complex modes per channel (n).")
    n_layers: int = Field(default=6, gt=0, description="Stacked S4D-FT layers (N).")
    cfr: float = Field(default=10.0, gt=0, description="Real-part scale of the state matrix.")
    cfi: float = Field(default=10.0, gt=0, description="Imaginary-part scale of the state matrix.")
    tuning_init: Literal["range", "fixed", "identity"] = Field(
        default="range",
        description=(
            "How (alpha_r, alpha_i) start: 'range' draws U(0, cfr] / U(0, cfi], "
            "'fixed' starts at (cfr, cfi), 'identity' starts at (1, 1)."
        ),
    )
    dropout: float = Field(default=0.2, ge=0.0, lt=1.0, description="Dropout inside S4D-FT layers.")
    min_dt: float = Field(default=0.01, gt=0, description="Lower bound of the initial time step.")
    max_dt: float = Field(default=0.1, gt=0, description="Upper bound of the initial time step.")
    time_embedding_dim: int = Field(default=64, ge=2, description="Fourier embedding width (even).")
    l_p: int = Field(default=365, gt=0, description="Past window length L_p.")
    l_f: int = Field(default=8, gt=0, description="Nowcast + forecast length L_f.")
    l_ff: int = Field(default=7, gt=0, description="Future forcing length L_ff.")
    d_z: int = Field(default=5, gt=0, description="Number of dynamic forcings.")
    d_s: int = Field(default=27, gt=0, description="Number of static attributes.")

    @model_validator(mode="after")
    def _check_geometry(self) -> BackboneConfig:
        if self.l_f != self.l_ff + 1:
            raise ValueError(f"l_f must equal 1 + l_ff (got l_f={self.l_f}, l_ff={self.l_ff})")
        if self.min_dt > self.max_dt:
            raise ValueError("min_dt must not exceed max_dt")
        if self.time_embedding_dim % 2:
            raise ValueError("time_embedding_dim must be even")
        return self

    @property
    def seq_len(self) -> int:
        """Length of the assembled input sequence (L_p + L_ff)."""
        return self.l_p + self.l_ff


class LstmConfig(_Section):
    """Recurrent baseline sizes."""

    hidden_size: int = Field(default=256, gt=0)
    dropout: float = Field(default=0.5, ge=0.0, lt=1.0)
    initial_forget_bias: float = Field(default=3.0)
    time_embedding_dim: int = Field(default=64, ge=2)


class ModelConfig(_Section):
    kind: ModelKind = ModelKind.HYDRODIFFUSION
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    lstm: LstmConfig = Field(default_factory=LstmConfig)


# ---------------------------------------------------------------------------
# Diffusion
# ---------------------------------------------------------------------------


class DiffusionConfig(_Section):
    """Sampler settings."""

    sample_steps: int = Field(default=10, ge=1, description="DDIM steps T.")
    schedule: Literal["cosine"] = "cosine"
    noise_direction: Literal["epsilon_hat", "literal_velocity"] = Field(
        default="epsilon_hat",
        description=(
            "Direction re-injected at each DDIM step: the reconstructed noise "
            "(sigma*x + alpha*v) or the raw velocity estimate."
        ),
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class TrainConfig(_Section):
    epochs: int = Field(default=60, ge=1)
    batch_size: int = Field(default=256, ge=1)
    optimizer: Literal["lion", "adam"] = "lion"
    lr_schedule: Literal["warmup_linear", "piecewise"] = "warmup_linear"
    base_lr: float = Field(default=3e-5, gt=0, description="Peak global learning rate.")
    ssm_lr_cap: float = Field(default=3e-6, gt=0, description="Cap on the S4D kernel learning rate.")
    dt_lr: float = Field(default=1e-3, gt=0, description="Learning rate for log_dt.")
    ssm_weight_decay: float = Field(default=4e-5, ge=0)
    weight_decay: float = Field(default=0.0, ge=0)
    betas: tuple[float, float] = (0.9, 0.99)
    piecewise_lrs: list[float] = Field(default_factory=lambda: [1e-3, 5e-4, 1e-4])
    piecewise_epochs: list[int] = Field(default_factory=lambda: [10, 10, 10])
    grad_clip: float | None = Field(default=None, gt=0, description="Global-norm clip; off when unset.")
    nse_eps: float = Field(default=0.0, ge=0, description="Added to basin std inside the NSE loss.")
    dropout: float | None = Field(default=None, ge=0.0, lt=1.0, description="Overrides model dropout.")
    dtype: Literal["float64", "float32"] = "float64"
    checkpoint_policy: Literal["auto", "final", "best_val"] = "auto"
    seed: int | None = Field(default=None, description="Overrides the root seed for training.")

    @model_validator(mode="after")
    def _check_piecewise(self) -> TrainConfig:
        if len(self.piecewise_lrs) != len(self.piecewise_epochs):
            raise ValueError("piecewise_lrs and piecewise_epochs must have equal length")
        if any(lr <= 0 for lr in self.piecewise_lrs):
            raise ValueError("piecewise_lrs must be positive")
        return self


# ---------------------------------------------------------------------------
# Data, splits, forecasting, evaluation
# ---------------------------------------------------------------------------


class SyntheticConfig(_Section):
    """Ranges the synthetic basin parameters are drawn from."""

    k_range: tuple[float, float] = (0.05, 0.3)
    rain_prob_range: tuple[float, float] = (0.2, 0.5)
    rain_scale_range: tuple[float, float] = (4.0, 12.0)
    temp_mean_range: tuple[float, float] = (4.0, 16.0)
    temp_amplitude_range: tuple[float, float] = (6.0, 14.0)
    initial_storage: float = Field(default=20.0, ge=0)


class DataConfig(_Section):
    data_dir: Path = Path("data")
    n_basins: int = Field(default=8, ge=1)
    n_days: int = Field(default=3650, ge=400)
    start_date: date = date(2000, 1, 1)
    normalization: Literal["pooled", "per_basin"] = "pooled"
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)


class SplitConfig(_Section):
    """Explicit split dates; unset values follow the year-based default layout."""

    train_start: date | None = None
    train_end: date | None = None
    val_start: date | None = None
    val_end: date | None = None
    test_start: date | None = None
    test_end: date | None = None


class ForecastConfig(_Section):
    members: int = Field(default=50, ge=1)
    split: Literal["train", "val", "test"] = "test"
    date_stride: int = Field(default=1, ge=1, description="Use every n-th valid init date.")
    clamp_zero: bool = False
    batch_size: int = Field(default=2048, ge=1, description="Trajectories per sampler call.")


class EvaluationConfig(_Section):
    leads: list[int] | None = Field(default=None, description="Lead days to report; all when unset.")
    reliability_bins: int = Field(default=10, ge=2)
    event_quantile: float = Field(default=0.9, gt=0, lt=1)
    fhv_fraction: float = Field(default=0.001, gt=0, lt=1)
    flv_fraction: float = Field(default=0.3, gt=0, lt=1)


class ExperimentConfig(_Section):
    kinds: list[ModelKind] = Field(
        default_factory=lambda: [ModelKind.DETERMINISTIC_SSM, ModelKind.HYDRODIFFUSION]
    )
    reference: Literal["climatology"] = "climatology"


class RunConfig(_Section):
    """Top-level run configuration."""

    seed: int = Field(default=0, ge=0)
    threads: int | None = Field(default=None, ge=1)
    output_dir: Path = Path("runs/default")
    data: DataConfig = Field(default_factory=DataConfig)
    splits: SplitConfig = Field(default_factory=SplitConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    forecast: ForecastConfig = Field(default_factory=ForecastConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)


# Per-kind starting points, laid under whatever a config document sets
# explicitly (see :func:`hydrodiffusion.config.resolve_kind_config`).
# Kinds without an entry use the RunConfig defaults above.
KIND_PRESETS: dict[ModelKind, dict] = {
    ModelKind.DETERMINISTIC_SSM: {
        "model": {"backbone": {"d_model": 128, "d_state": 128, "dropout": 0.12}},
        "train": {
            "epochs": 50,
            "base_lr": 4e-4,
            "ssm_lr_cap": 4e-5,
            "weight_decay": 0.03,
            "ssm_weight_decay": 0.02,
        },
    },
    ModelKind.DETERMINISTIC_LSTM: {
        "model": {"lstm": {"dropout": 0.4}},
        "train": {
            "epochs": 30,
            "optimizer": "adam",
            "lr_schedule": "piecewise",
            "piecewise_lrs": [1e-3, 5e-4, 1e-4],
            "piecewise_epochs": [10, 10, 10],
        },
    },
}


# ---------------------------------------------------------------------------
# LangGraph State
# ---------------------------------------------------------------------------


class ExperimentState(TypedDict):
    """State flowing through every node of the experiment pipeline."""

    # --- Inputs ---
    config: RunConfig
    output_dir: str

    # --- Artifacts ---
    data_dir: str
    checkpoints: dict[str, str]  # model kind -> checkpoint path
    forecasts: dict[str, str]  # model kind or "climatology" -> forecast CSV
    reports: dict[str, str]  # model kind -> evaluation directory

    # --- Control ---
    failed: bool
    error: str
    exit_code: int
    summary: dict[str, float]
