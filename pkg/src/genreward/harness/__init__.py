"""Run orchestration: configuration, pipeline stages, checks, reports and the CLI."""

from .config import ConfigError, RunConfig, emit_config, load_config, parse_config

__all__ = ["ConfigError", "RunConfig", "emit_config", "load_config", "parse_config"]
