"""Pipeline configuration: endpoint role bindings, sampling and voting
parameters, and store paths. One TOML file plus environment-variable
overrides."""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from funduskit.gateway import EndpointRole, ROLES

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# Defaults: the VF extractor samples five rollouts with a vote threshold
# of two; RL training uses 4 rollouts per prompt at temperature 1.0.
DEFAULT_K_ROLLOUTS = 5
DEFAULT_VOTE_THRESHOLD = 2
DEFAULT_GROUP_SIZE = 4
DEFAULT_TEMPERATURE = 1.0
DEFAULT_REPROMPT_BUDGET = 2

ENV_PREFIX = "FUNDUSKIT_"


@dataclass
class PipelineConfig:
    endpoints: dict[str, EndpointRole] = field(default_factory=dict)
    k_rollouts: int = DEFAULT_K_ROLLOUTS
    vote_threshold: int | None = None  # None -> floor(k/2)
    group_size: int = DEFAULT_GROUP_SIZE
    temperature: float = DEFAULT_TEMPERATURE
    reprompt_budget: int = DEFAULT_REPROMPT_BUDGET
    advantage_mode: str = "std"  # "std" or "mean"
    workers: int = 4
    acceptance_floor: float = 0.0
    strict_judge: bool = False
    seed: int = 0
    # stores and exports
    cache_dir: Path = Path("cache")
    dk_store: Path = Path("stores/dk")
    vf_store: Path = Path("stores/vf.jsonl")
    traces_out: Path = Path("exports/traces.jsonl")
    sft_export: Path = Path("exports/sft.jsonl")
    rl_export: Path = Path("exports/rl.jsonl")
    rejected_log: Path = Path("exports/rejected.jsonl")
    call_log: Path | None = None
    synonyms_file: Path | None = None
    templates_file: Path | None = None

    def __post_init__(self):
        if self.k_rollouts < 1:
            raise ValueError("k_rollouts must be >= 1")
        if self.vote_threshold is None:
            # Extrapolation for k != 5; the (5, 2) default mirrors the
            # majority rule.
            self.vote_threshold = self.k_rollouts // 2
        if not (0 <= self.vote_threshold < self.k_rollouts):
            raise ValueError("vote_threshold must satisfy 0 <= t < k_rollouts")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.advantage_mode not in ("std", "mean"):
            raise ValueError("advantage_mode must be 'std' or 'mean'")


_PIPELINE_KEYS = {
    "k_rollouts": int,
    "vote_threshold": int,
    "group_size": int,
    "temperature": float,
    "reprompt_budget": int,
    "advantage_mode": str,
    "workers": int,
    "acceptance_floor": float,
    "strict_judge": bool,
    "seed": int,
}

_PATH_KEYS = (
    "cache_dir", "dk_store", "vf_store", "traces_out", "sft_export",
    "rl_export", "rejected_log", "call_log", "synonyms_file", "templates_file",
)


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Load a TOML config file; every key can be overridden by an environment
    variable FUNDUSKIT_<KEY> (uppercased)."""
    raw: dict = {}
    base = Path(".")
    if path is not None:
        base = Path(path).parent
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)

    kwargs: dict = {}
    pipeline = raw.get("pipeline", {})
    for key, cast in _PIPELINE_KEYS.items():
        env = os.environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            kwargs[key] = cast(env) if cast is not bool else env.lower() in ("1", "true", "yes")
        elif key in pipeline:
            kwargs[key] = pipeline[key]

    paths = raw.get("paths", {})
    for key in _PATH_KEYS:
        env = os.environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            kwargs[key] = Path(env)
        elif key in paths:
            kwargs[key] = base / paths[key]

    endpoints: dict[str, EndpointRole] = {}
    for role, spec in raw.get("endpoints", {}).items():
        if role not in ROLES:
            raise ValueError(f"unknown endpoint role {role!r}; expected one of {ROLES}")
        endpoints[role] = EndpointRole(
            role=role,
            base_url=spec.get("base_url", ""),
            model_name=spec.get("model_name", ""),
            temperature=spec.get("temperature", 0.0),
            max_tokens=spec.get("max_tokens", 1024),
            api_key_env=spec.get("api_key_env"),
        )
    kwargs["endpoints"] = endpoints
    return PipelineConfig(**kwargs)
