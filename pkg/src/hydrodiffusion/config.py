"""Run configuration loading.

Configuration documents live in ``config/`` as YAML (``yaml.safe_load``) or
TOML (``tomllib``); both map onto :class:`~hydrodiffusion.models.RunConfig`,
whose sections reject unknown keys.
"""

from __future__ import annotations

import logging
import os
import tomllib
from pathlib import Path
from typing import Any

import torch
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from hydrodiffusion.errors import ConfigError
from hydrodiffusion.models import KIND_PRESETS, ModelKind, RunConfig

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parents[2]
CONFIG_DIR = PROJECT_ROOT / "config"
THREADS_ENV = "HYDRODIFF_THREADS"


def _read_document(path: Path) -> dict[str, Any]:
    suffix = path.suffix.lower()
    text = path.read_text(encoding="utf-8")
    if suffix == ".toml":
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if suffix in (".yaml", ".yml"):
        try:
            return yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    raise ConfigError(f"Unsupported config format {suffix!r} (use .yaml or .toml)")


def _merge(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(
    path: str | Path | None = None, overrides: dict[str, Any] | None = None
) -> RunConfig:
    """Load and validate a run configuration.

    Args:
        path: YAML or TOML document; defaults only when None.
        overrides: Nested mapping applied on top of the file (CLI flags).

    Returns:
        The validated RunConfig.

    Raises:
        ConfigError: unreadable file, syntax error, or schema violation.
    """
    document: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        document = _read_document(path)
        if not isinstance(document, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    if overrides:
        document = _merge(document, overrides)
    try:
        config = RunConfig.model_validate(document)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    logger.debug("[config] loaded %s (seed=%d, kind=%s)", path, config.seed, config.model.kind.value)
    return config


def _explicit_fields(section: BaseModel) -> dict[str, Any]:
    """Values set explicitly on ``section``, recursing into nested sections."""
    explicit: dict[str, Any] = {}
    for name in type(section).model_fields:
        value = getattr(section, name)
        if isinstance(value, BaseModel):
            nested = _explicit_fields(value)
            if nested:
                explicit[name] = nested
        elif name in section.model_fields_set:
            explicit[name] = value
    return explicit


def resolve_kind_config(config: RunConfig, kind: ModelKind | str) -> RunConfig:
    """Return the configuration one model kind trains with.

    The kind's entry in :data:`~hydrodiffusion.models.KIND_PRESETS` fills
    every key the configuration does not set explicitly; keys read from a
    document, passed as overrides or assigned afterwards keep their values.
    ``model.kind`` is set to ``kind``.

    Raises:
        ConfigError: the merged document fails validation.
    """
    kind = ModelKind(kind)
    preset = KIND_PRESETS.get(kind, {})
    document = _merge(preset, _explicit_fields(config))
    document = _merge(document, {"model": {"kind": kind}})
    try:
        resolved = RunConfig.model_validate(document)
    except ValidationError as exc:
        raise ConfigError(f"{kind.value} preset: {exc}") from exc
    if preset:
        logger.info(
            "[config] %s preset: optimizer=%s schedule=%s epochs=%d",
            kind.value,
            resolved.train.optimizer,
            resolved.train.lr_schedule,
            resolved.train.epochs,
        )
    return resolved


def configure_runtime(config: RunConfig) -> int:
    """Apply thread cap and determinism switches; return the thread count used.

    ``config.threads`` wins over ``HYDRODIFF_THREADS`` (environment or .env).
    """
    load_dotenv()
    threads = config.threads
    if threads is None:
        raw = os.environ.get(THREADS_ENV)
        if raw:
            try:
                threads = max(1, int(raw))
            except ValueError as exc:
                raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if threads is not None:
        torch.set_num_threads(threads)
    if threads == 1:
        torch.use_deterministic_algorithms(True)
    torch.set_default_dtype(torch_dtype(config))
    used = torch.get_num_threads()
    logger.info("[config] threads=%d dtype=%s", used, config.train.dtype)
    return used


def torch_dtype(config: RunConfig) -> torch.dtype:
    return torch.float64 if config.train.dtype == "float64" else torch.float32
