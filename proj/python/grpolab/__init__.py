"""Python access to the grpolab core."""

from ._grpolab import (
    ConfigError,
    DomainError,
    NumericalError,
    RunConfig,
    UsageError,
    clipped_surrogate,
    config_keys,
    execute_run,
    gae,
    generate_tasks,
    grpo_token_coefficient,
    kl_estimate,
    maj_at_k,
    normalize_rewards,
    outcome_advantages,
    parse_config,
    process_advantages,
)

__all__ = [
    "ConfigError",
    "DomainError",
    "NumericalError",
    "RunConfig",
    "UsageError",
    "clipped_surrogate",
    "config_keys",
    "execute_run",
    "gae",
    "generate_tasks",
    "grpo_token_coefficient",
    "kl_estimate",
    "maj_at_k",
    "normalize_rewards",
    "outcome_advantages",
    "parse_config",
    "process_advantages",
]
