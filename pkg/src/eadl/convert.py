"""Checkpoint conversion: swap the attention pattern and extend the
position table while preserving every other weight bit-for-bit."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import attention as att
from . import numcore as nc
from .encoder import ModelConfig, ModelWeights, clone_weights
from .errors import ParameterError

POSITION_EXTENSIONS = ("cyclic_copy", "random_init")


@dataclass(frozen=True)
class ConvertPlan:
    target_spec: att.AttentionSpec
    new_max_positions: int
    position_extension: str = "cyclic_copy"
    seed: int = 0  # used by random_init only
    anchor_global: bool = True  # make token 0 global when switching pattern family

    def validate(self) -> None:
        self.target_spec.validate()
        if self.position_extension not in POSITION_EXTENSIONS:
            raise ParameterError(
                f"position_extension must be one of {POSITION_EXTENSIONS}, got {self.position_extension!r}"
            )
        if self.new_max_positions < 1:
            raise ParameterError("new_max_positions must be >= 1")


def _anchored(spec: att.AttentionSpec, current: att.AttentionSpec) -> att.AttentionSpec:
    """Token 0 becomes a global position when the pattern family changes;
    a same-family rewrite is left exactly as requested."""
    if type(spec) is type(current):
        return spec
    if isinstance(spec, att.SlidingWindow) and 0 not in spec.global_tokens:
        return dataclasses.replace(spec, global_tokens=tuple(sorted((0, *spec.global_tokens))))
    if isinstance(spec, att.BlockSparse) and spec.global_blocks < 1:
        return dataclasses.replace(spec, global_blocks=1)
    if isinstance(spec, att.LocalSparseGlobal) and spec.global_tokens < 1:
        return dataclasses.replace(spec, global_tokens=1)
    return spec


def _extend_positions(old: np.ndarray, new_max: int, policy: str, seed: int) -> np.ndarray:
    old_max, hidden = old.shape
    table = np.empty((new_max, hidden), dtype=old.dtype)
    table[:old_max] = old  # prefix rows preserved bitwise
    if new_max > old_max:
        if policy == "cyclic_copy":
            idx = np.arange(old_max, new_max) % old_max
            table[old_max:] = old[idx]
        else:
            rng = nc.make_rng(seed)
            table[old_max:] = rng.normal(0.0, 0.02, size=(new_max - old_max, hidden))
    return table


def convert(config: ModelConfig, weights: ModelWeights, plan: ConvertPlan) -> tuple[ModelConfig, ModelWeights]:
    """Rewrite a checkpoint to the target attention pattern and maximum
    length. Identity plans return a bit-identical copy."""
    plan.validate()
    if plan.new_max_positions < config.max_positions:
        raise ParameterError(
            f"cannot shrink max_positions from {config.max_positions} to {plan.new_max_positions}"
        )
    if isinstance(plan.target_spec, att.Nystrom) and plan.target_spec.landmarks > plan.new_max_positions:
        raise ParameterError(
            f"landmarks ({plan.target_spec.landmarks}) exceed new max_positions ({plan.new_max_positions})"
        )

    if plan.target_spec == config.attention_spec and plan.new_max_positions == config.max_positions:
        return config, clone_weights(config, weights)

    spec = plan.target_spec
    if plan.anchor_global:
        spec = _anchored(spec, config.attention_spec)
    new_config = dataclasses.replace(
        config, attention_spec=spec, max_positions=plan.new_max_positions
    )
    new_weights = clone_weights(config, weights)
    table = _extend_positions(
        weights.position_embeddings.data, plan.new_max_positions, plan.position_extension, plan.seed
    )
    new_weights.position_embeddings.release()
    new_weights.position_embeddings = nc.Tensor(table, requires_grad=True)
    new_config.validate()
    return new_config, new_weights


def extend_only(
    config: ModelConfig,
    weights: ModelWeights,
    new_max_positions: int,
    position_extension: str = "cyclic_copy",
    seed: int = 0,
) -> tuple[ModelConfig, ModelWeights]:
    """Extend the position table and leave the attention pattern alone:
    the quadratic-cost baseline that conversion is measured against."""
    plan = ConvertPlan(
        target_spec=config.attention_spec,
        new_max_positions=new_max_positions,
        position_extension=position_extension,
        seed=seed,
        anchor_global=False,
    )
    return convert(config, weights, plan)
