"""Environment settings and the line-based pipeline config file."""

from __future__ import annotations

import logging
from collections.abc import Iterable
from pathlib import Path

from pydantic import ValidationError
from pydantic_settings import BaseSettings

from tetdiff.errors import ConfigError
from tetdiff.models import Config

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    model_config = {"env_prefix": "TETDIFF_", "env_file": ".env"}

    threads: int = 1
    log_level: str = "INFO"
    config: Path | None = None


def _assign(tree: dict, key: str, value: str) -> None:
    parts = [p.strip() for p in key.split(".")]
    if not all(parts) or len(parts) > 2:
        raise ConfigError("expected 'section.key' or 'key'", key=key)
    if len(parts) == 1:
        tree[parts[0]] = value
        return
    section = tree.setdefault(parts[0], {})
    if not isinstance(section, dict):
        raise ConfigError("not a section", key=parts[0])
    section[parts[1]] = value


def _parse_lines(lines: Iterable[str], source: str) -> dict:
    tree: dict = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        _assign(tree, key, value)
    return tree


def _merge(base: dict, extra: dict) -> dict:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


def parse_config(path: Path | None = None, overrides: Iterable[str] = ()) -> Config:
    """Load `section.key = value` lines from `path`, apply overrides, validate.

    Overrides use the same syntax (without spaces is fine) and win over the file.
    """
    tree: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}", key=str(path))
        tree = _parse_lines(path.read_text().splitlines(), str(path))
    tree = _merge(tree, _parse_lines(overrides, "override"))

    try:
        config = Config.model_validate(tree)
    except ValidationError as exc:
        err = exc.errors()[0]
        key = ".".join(str(p) for p in err["loc"])
        raise ConfigError(err["msg"], key=key) from exc
    if config.diffusion.beta_start > config.diffusion.beta_end:
        raise ConfigError("beta_start must not exceed beta_end", key="diffusion.beta_start")
    if config.diffusion.steps > config.diffusion.T:
        raise ConfigError("sampler steps exceed T", key="diffusion.steps")
    logger.debug("Loaded config from %s with %d override groups", path, len(tree))
    return config
