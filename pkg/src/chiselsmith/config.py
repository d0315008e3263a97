"""One JSON config file drives every entrypoint; flags override fields.

Relative paths inside the file (scaffold dir, mock playlist, workspace root)
resolve against the config file's own directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .domain import RunConfig, Sampling
from .gateway import ProviderConfig
from .sim_adapter import MISMATCH_CAP, SimulatorConfig


class ConfigError(ValueError):
    """Config file missing, malformed, or failing field validation."""


@dataclass(frozen=True)
class ToolchainConfig:
    scaffold_dir: str | None = None
    simulator: SimulatorConfig = SimulatorConfig()
    workspace_root: str | None = None
    keep_workspaces: bool = False


@dataclass(frozen=True)
class AppConfig:
    # provider is None when the config names no endpoint (mock-only configs).
    provider: ProviderConfig | None
    run: RunConfig
    toolchain: ToolchainConfig
    mock_playlist: str | None = None


def _section(data: Mapping[str, Any], name: str) -> dict[str, Any]:
    section = data.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(section)


def _sampling(raw: Any, where: str) -> Sampling | None:
    if raw in (None, "default"):
        return None
    if isinstance(raw, dict) and "temperature" in raw and "top_p" in raw:
        return Sampling(temperature=float(raw["temperature"]), top_p=float(raw["top_p"]))
    raise ConfigError(f"{where}.sampling must be \"default\" or {{temperature, top_p}}")


def _resolve(base: Path, value: str | None) -> str | None:
    if value is None:
        return None
    path = Path(value)
    return str(path if path.is_absolute() else base / path)


def load_config(path: str | Path) -> AppConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    base = path.parent

    run_raw = _section(data, "run")
    provider_raw = _section(data, "provider")
    toolchain_raw = _section(data, "toolchain")
    mock_raw = _section(data, "mock")

    try:
        run = RunConfig(
            max_iterations=int(run_raw.get("max_iterations", 10)),
            trials=int(run_raw.get("trials", 10)),
            k_values=tuple(int(k) for k in run_raw.get("k_values", [1, 5, 10])),
            model_id=str(provider_raw.get("model_id", "")),
            sampling=_sampling(provider_raw.get("sampling"), "provider"),
            compile_timeout_s=float(run_raw.get("compile_timeout_s", 180)),
            sim_timeout_s=float(run_raw.get("sim_timeout_s", 120)),
            llm_timeout_s=float(run_raw.get("llm_timeout_s", 120)),
            parallelism=int(run_raw.get("parallelism", 1)),
            escape_enabled=bool(run_raw.get("escape_enabled", True)),
        )
    except ValueError as exc:
        raise ConfigError(f"run: {exc}") from None

    provider: ProviderConfig | None = None
    if provider_raw.get("endpoint"):
        try:
            provider = ProviderConfig(
                endpoint=str(provider_raw["endpoint"]),
                model_id=str(provider_raw.get("model_id", "")),
                api_key_env=str(provider_raw.get("api_key_env", "PROVIDER_API_KEY")),
                request_timeout_s=float(
                    provider_raw.get("request_timeout_s", run.llm_timeout_s)
                ),
                max_retries=int(provider_raw.get("max_retries", 3)),
                sampling=run.sampling,
                rate_limit_per_s=(
                    float(provider_raw["rate_limit_per_s"])
                    if provider_raw.get("rate_limit_per_s") is not None
                    else None
                ),
            )
        except ValueError as exc:
            raise ConfigError(f"provider: {exc}") from None

    sim_raw = toolchain_raw.get("simulator", {})
    if not isinstance(sim_raw, dict):
        raise ConfigError("toolchain.simulator must be an object")
    defaults = SimulatorConfig()
    simulator = SimulatorConfig(
        compile_cmd=tuple(sim_raw.get("compile_cmd", defaults.compile_cmd)),
        run_cmd=tuple(sim_raw.get("run_cmd", defaults.run_cmd)),
        seed_plusarg=str(sim_raw.get("seed_plusarg", defaults.seed_plusarg)),
        mismatch_cap=int(sim_raw.get("mismatch_cap", MISMATCH_CAP)),
    )
    toolchain = ToolchainConfig(
        scaffold_dir=_resolve(base, toolchain_raw.get("scaffold_dir")),
        simulator=simulator,
        workspace_root=_resolve(base, toolchain_raw.get("workspace_root")),
        keep_workspaces=bool(toolchain_raw.get("keep_workspaces", False)),
    )
    return AppConfig(
        provider=provider,
        run=run,
        toolchain=toolchain,
        mock_playlist=_resolve(base, mock_raw.get("playlist")),
    )
