"""Forward masking process and the masked-diffusion objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .backbone import ModelParams, forward
from .templates import AssembledSequence, Family
from .vocab import VocabLayout

T_MIN = 1e-3
MAX_REDRAWS = 64


@dataclass(frozen=True)
class CorruptionDraw:
    t: float
    mask: np.ndarray          # bool per position
    corrupted: np.ndarray

    @property
    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.mask)


def mask_from_uniforms(u: np.ndarray, t: float, corruptible: np.ndarray) -> np.ndarray:
    """Position i is masked iff it is corruptible and ``u[i] < t``.

    Thresholding one shared uniform per position makes the masks nested in t.
    """
    return corruptible & (u < t)


def corrupt(
    rng: np.random.Generator,
    layout: VocabLayout,
    seq: AssembledSequence,
    t: float | None = None,
    t_min: float = T_MIN,
) -> CorruptionDraw:
    """Sample ``t`` and mask each corruptible position independently with probability ``t``.

    Draws whose mask misses every supervised position are redrawn at the same
    ``t``; after ``MAX_REDRAWS`` failures one supervised position is forced.
    """
    corruptible = seq.corruptible
    if not corruptible.any():
        raise ValueError("sequence has no corruptible positions")
    if t is None:
        t = float(t_min + (1.0 - t_min) * (1.0 - rng.random()))  # (t_min, 1]
    elif not 0.0 < t <= 1.0:
        raise ValueError("t must lie in (0, 1]")
    wanted = seq.supervised if seq.supervised.any() else corruptible
    for _ in range(MAX_REDRAWS):
        mask = mask_from_uniforms(rng.random(len(seq)), t, corruptible)
        if (mask & wanted).any():
            break
    else:
        mask = np.zeros(len(seq), dtype=bool)
        mask[rng.choice(np.flatnonzero(wanted))] = True
    corrupted = np.where(mask, layout.mask_id, seq.tokens)
    return CorruptionDraw(float(t), mask, corrupted)


def loss(params: ModelParams, seq: AssembledSequence, draw: CorruptionDraw) -> float:
    """``(1/t) * sum over masked & supervised positions of -log p(x0_i | x_t)``."""
    contrib = draw.mask & seq.supervised
    if not contrib.any():
        raise ValueError("no masked supervised position contributes to the loss")
    with torch.no_grad():
        logits = forward(params, draw.corrupted)
        logp = torch.log_softmax(logits.to(torch.float64), dim=-1)
    idx = np.flatnonzero(contrib)
    nll = -logp[idx, seq.tokens[idx]].sum()
    return float(nll) / draw.t


def drop_condition(
    rng: np.random.Generator, layout: VocabLayout, seq: AssembledSequence, p_drop: float = 0.1
) -> AssembledSequence:
    """With probability ``p_drop`` replace the text conditioning with MASK (delimiters kept)."""
    if seq.family not in (Family.TextToImage, Family.ImageToImage):
        raise ValueError("condition dropout applies to image-generation families only")
    if p_drop <= 0 or rng.random() >= p_drop:
        return seq
    return unconditional(layout, seq)


def unconditional(layout: VocabLayout, seq: AssembledSequence) -> AssembledSequence:
    if seq.condition_span is None:
        raise ValueError("sequence has no droppable conditioning")
    a, b = seq.condition_span
    tokens = seq.tokens.copy()
    tokens[a:b] = layout.mask_id
    return seq.with_tokens(tokens)
