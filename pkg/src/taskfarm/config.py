"""Configuration: YAML file -> dataclasses, with environment overrides.

Sections mirror the moving parts (dispatcher, worker, provider, calibration,
bench). Every field has a default, unknown keys are rejected loudly, and a
handful of TASKFARM_* environment variables override the file for the knobs
that differ per deployment.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml


class ConfigError(ValueError):
    pass


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"address must look like host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


@dataclass
class DispatcherConfig:
    address: str = "127.0.0.1:7075"
    mode: str = "push"
    bundle_size: int = 1
    max_retries: int = 1
    suspend_threshold: int = 3
    heartbeat_interval: float = 5.0
    log_dir: str = "runs"
    link_mbps: Optional[float] = None

    @property
    def host_port(self) -> tuple[str, int]:
        return parse_address(self.address)


@dataclass
class WorkerConfig:
    cores: int = 1
    mode: Optional[str] = None          # None: follow dispatcher.mode
    scratch_dir: str = "/tmp/taskfarm"
    cache_capacity_bytes: int = 1 << 30
    prefetch_depth: int = 2
    task_timeout_s: Optional[float] = None
    fail_fast_patterns: list[str] = field(
        default_factory=lambda: ["stale nfs handle", "stale file handle"])


@dataclass
class ProviderConfig:
    name: str = "local"
    block_size: int = 1
    start_script: Optional[str] = None
    stop_script: Optional[str] = None


@dataclass
class CalibrationConfig:
    header: float = 40.0
    mss: float = 960.0
    base_packets: float = 7.34
    fixed_overhead: float = 619.6


@dataclass
class BenchConfig:
    out_dir: str = "bench-results"
    time_scale: float = 1.0
    payload_link_mbps: float = 4.0


@dataclass
class RunConfig:
    dispatcher: DispatcherConfig = field(default_factory=DispatcherConfig)
    worker: WorkerConfig = field(default_factory=WorkerConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)


_SECTIONS = {f.name: f.type for f in fields(RunConfig)}

# environment variable -> (section, field, converter)
_ENV_OVERRIDES = {
    "TASKFARM_ADDRESS": ("dispatcher", "address", str),
    "TASKFARM_MODE": ("dispatcher", "mode", str),
    "TASKFARM_BUNDLE_SIZE": ("dispatcher", "bundle_size", int),
    "TASKFARM_LOG_DIR": ("dispatcher", "log_dir", str),
    "TASKFARM_LINK_MBPS": ("dispatcher", "link_mbps", float),
    "TASKFARM_CORES": ("worker", "cores", int),
    "TASKFARM_SCRATCH_DIR": ("worker", "scratch_dir", str),
    "TASKFARM_BENCH_OUT": ("bench", "out_dir", str),
}


def _apply_section(obj: Any, doc: dict, section: str) -> None:
    known = {f.name: f for f in fields(obj)}
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(
                f"unknown key {section}.{key!r}; valid keys: "
                f"{', '.join(sorted(known))}")
        current = getattr(obj, key)
        if value is None:
            setattr(obj, key, None)
            continue
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{section}.{key} must be a boolean")
        elif isinstance(current, int) and not isinstance(value, bool):
            if not isinstance(value, int):
                raise ConfigError(f"{section}.{key} must be an integer")
        elif isinstance(current, float):
            if not isinstance(value, (int, float)):
                raise ConfigError(f"{section}.{key} must be a number")
            value = float(value)
        elif isinstance(current, str):
            if not isinstance(value, str):
                raise ConfigError(f"{section}.{key} must be a string")
        elif isinstance(current, list):
            if not isinstance(value, list):
                raise ConfigError(f"{section}.{key} must be a list")
        setattr(obj, key, value)


def load_config(path: Optional[str | Path] = None,
                env: Optional[dict[str, str]] = None) -> RunConfig:
    """Build RunConfig from defaults, then the YAML file, then environment."""
    cfg = RunConfig()
    if path is not None:
        raw = Path(path).read_text()
        doc = yaml.safe_load(raw) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        for section, content in doc.items():
            if section not in _SECTIONS:
                raise ConfigError(
                    f"unknown section {section!r}; valid sections: "
                    f"{', '.join(sorted(_SECTIONS))}")
            if content is None:
                continue
            if not isinstance(content, dict):
                raise ConfigError(f"section {section!r} must be a mapping")
            _apply_section(getattr(cfg, section), content, section)

    env = os.environ if env is None else env
    for var, (section, key, conv) in _ENV_OVERRIDES.items():
        if var in env:
            try:
                setattr(getattr(cfg, section), key, conv(env[var]))
            except ValueError as exc:
                raise ConfigError(f"{var}={env[var]!r}: {exc}")

    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    parse_address(cfg.dispatcher.address)
    if cfg.dispatcher.mode not in ("push", "pull"):
        raise ConfigError("dispatcher.mode must be push or pull")
    if cfg.dispatcher.bundle_size < 1:
        raise ConfigError("dispatcher.bundle_size must be >= 1")
    if cfg.dispatcher.max_retries < 0:
        raise ConfigError("dispatcher.max_retries must be >= 0")
    if cfg.dispatcher.suspend_threshold < 1:
        raise ConfigError("dispatcher.suspend_threshold must be >= 1")
    if cfg.worker.cores < 1:
        raise ConfigError("worker.cores must be >= 1")
    if cfg.worker.mode not in (None, "push", "pull"):
        raise ConfigError("worker.mode must be push, pull, or omitted")
    if cfg.provider.name not in ("local", "script"):
        raise ConfigError("provider.name must be local or script")
    if cfg.provider.name == "script" and not (
            cfg.provider.start_script and cfg.provider.stop_script):
        raise ConfigError("script provider needs start_script and stop_script")
    if cfg.provider.block_size < 1:
        raise ConfigError("provider.block_size must be >= 1")
    if cfg.bench.time_scale <= 0:
        raise ConfigError("bench.time_scale must be positive")


def dump_config(cfg: RunConfig) -> str:
    doc = {
        section: {f.name: getattr(getattr(cfg, section), f.name)
                  for f in fields(getattr(cfg, section))}
        for section in _SECTIONS
    }
    return yaml.safe_dump(doc, sort_keys=False)
