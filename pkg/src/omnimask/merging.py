"""Linear checkpoint merging when the second model has an extended vocabulary.

``alpha`` weights the backbone: ``merged = alpha * theta0 + (1 - alpha) * theta1``.
Vocabulary-dependent tensors are handled per strategy:

* ``shared``: the backbone slice ``[0, |V0|)`` is interpolated, new entries come from theta1.
* ``stage1-only``: the whole tensor comes from theta1.
* ``modality-disentangled``: the backbone slice is kept from theta0, new entries from theta1.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch

from .backbone import ModelParams

# Vocabulary axis per tensor name; anything not listed has no vocabulary axis.
VOCAB_AXIS = {"embed": 0, "head": 1}


class Strategy(enum.Enum):
    SHARED = "shared"
    STAGE1_ONLY = "stage1-only"
    MODALITY_DISENTANGLED = "modality-disentangled"


@dataclass(frozen=True)
class MergeConfig:
    alpha: float = 0.6
    strategy: Strategy = Strategy.MODALITY_DISENTANGLED

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha={self.alpha} outside [0, 1]")
        object.__setattr__(self, "strategy", Strategy(self.strategy))


def interpolate(a: torch.Tensor, b: torch.Tensor, alpha: float) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if alpha == 1:
        return a.clone()
    if alpha == 0:
        return b.clone()
    return alpha * a + (1 - alpha) * b


def _merge_vocab_tensor(a: torch.Tensor, b: torch.Tensor, axis: int, alpha: float,
                        strategy: Strategy) -> torch.Tensor:
    v0 = a.shape[axis]
    other = [s for i, s in enumerate(a.shape) if i != axis]
    if other != [s for i, s in enumerate(b.shape) if i != axis] or b.shape[axis] < v0:
        raise ValueError(
            f"cannot merge vocab tensors {tuple(a.shape)} and {tuple(b.shape)} along axis {axis}"
        )
    if strategy is Strategy.STAGE1_ONLY:
        return b.clone()
    old = b.narrow(axis, 0, v0)
    new = b.narrow(axis, v0, b.shape[axis] - v0)
    if strategy is Strategy.SHARED:
        head = interpolate(a, old, alpha)
    else:
        head = a.clone()
    return torch.cat([head, new], dim=axis)


def merge(theta0: ModelParams, theta1: ModelParams, config: MergeConfig) -> ModelParams:
    """Merge a backbone on V0 with a stage-1 model on V1 ⊇ V0; result lives on V1."""
    if set(theta0) != set(theta1):
        only = sorted(set(theta0) ^ set(theta1))
        raise ValueError(f"tensors present in only one checkpoint: {only}")
    extra = theta1.config.vocab.total_size - theta0.config.vocab.total_size
    if extra < 0:
        raise ValueError("theta1 vocabulary is smaller than theta0's")
    merged = {}
    for name in theta1:
        a, b = theta0[name], theta1[name]
        axis = VOCAB_AXIS.get(name)
        if axis is None:
            merged[name] = interpolate(a, b, config.alpha)
        else:
            if b.shape[axis] - a.shape[axis] != extra:
                raise ValueError(f"{name}: vocabulary axis does not grow by {extra}")
            merged[name] = _merge_vocab_tensor(a, b, axis, config.alpha, config.strategy)
    return ModelParams(theta1.config, merged)
