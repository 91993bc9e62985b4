"""Reverse-diffusion decoding with confidence-based remasking.

Text and speech targets are split into blocks decoded left to right; image
targets are one block decoded fully in parallel. Within a block each step
predicts every masked position, keeps the ``k`` most confident predictions and
leaves the rest masked for later steps.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import vocab as V
from .backbone import ModelParams, forward
from .diffusion import unconditional
from .synth import text_symbol_ids
from .templates import AssembledSequence, Family
from .vocab import VocabLayout


class Schedule(enum.Enum):
    LINEAR = "linear"
    COSINE = "cosine"


class Remask(enum.Enum):
    LOW_CONFIDENCE = "low_confidence"
    RANDOM = "random"


@dataclass(frozen=True)
class DecodeConfig:
    steps: int
    block_length: int | None = None   # None: whole span is one block
    schedule: Schedule | None = None  # None: cosine for images, linear otherwise
    temperature: float = 0.0
    cfg_scale: float = 1.0            # only used for image-generation families
    remask: Remask = Remask.LOW_CONFIDENCE
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.block_length is not None and self.block_length < 1:
            raise ValueError("block_length must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if isinstance(self.schedule, str):
            object.__setattr__(self, "schedule", Schedule(self.schedule))
        if isinstance(self.remask, str):
            object.__setattr__(self, "remask", Remask(self.remask))


@dataclass
class DecodeTrace:
    forward_calls: int = 0
    masked_after_step: list[int] = field(default_factory=list)
    blocks: list[tuple[int, int]] = field(default_factory=list)
    steps_per_block: list[int] = field(default_factory=list)


def schedule_counts(n: int, steps: int, schedule: Schedule | str = Schedule.LINEAR) -> list[int]:
    """How many tokens to finalize at each of ``steps`` steps; sums to ``n``.

    Linear splits ``n`` as evenly as possible (earlier steps take the
    remainder). Cosine finalizes ``n * (1 - cos(pi/2 * i/steps))`` tokens by
    step ``i`` (the MaskGIT mask-fraction curve), rounded cumulatively. When
    ``steps <= n`` the cumulative counts are nudged so every step finalizes at
    least one token.
    """
    schedule = Schedule(schedule)
    if n < 1 or steps < 1:
        raise ValueError("n and steps must be >= 1")
    if schedule is Schedule.LINEAR:
        q, r = divmod(n, steps)
        return [q + (1 if i < r else 0) for i in range(steps)]
    cum = [round(n * (1.0 - math.cos(math.pi / 2 * i / steps))) for i in range(steps + 1)]
    cum[0], cum[-1] = 0, n
    if steps <= n:
        for i in range(1, steps):
            cum[i] = min(max(cum[i], cum[i - 1] + 1), n - (steps - i))
    return [cum[i + 1] - cum[i] for i in range(steps)]


def guided_logits(cond: torch.Tensor, uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """``uncond + scale * (cond - uncond)``; exact endpoints at 0 and 1."""
    if cond.shape != uncond.shape:
        raise ValueError("conditional and unconditional logits differ in shape")
    if scale == 1:
        return cond
    if scale == 0:
        return uncond
    return uncond + scale * (cond - uncond)


def allowed_ids(layout: VocabLayout, family: Family) -> np.ndarray:
    """Token ids a target of ``family`` may be decoded into."""
    if family.generates_image:
        return np.arange(layout.vision_offset, layout.speech_offset)
    if family.generates_speech:
        speech = np.arange(layout.speech_offset, layout.total_size)
        return np.concatenate([speech, [layout.special(V.END_SPEECH), layout.eos_id]])
    return np.concatenate([np.asarray(text_symbol_ids(layout)), [layout.eos_id]])


def split_blocks(span: tuple[int, int], block_length: int | None, image: bool) -> list[tuple[int, int]]:
    a, e = span
    if image or block_length is None or block_length >= e - a:
        return [(a, e)]
    return [(s, min(s + block_length, e)) for s in range(a, e, block_length)]


def apportion_steps(lengths: list[int], steps: int) -> list[int]:
    """Split a step budget over blocks proportionally to their lengths.

    Each block gets at least one step and at most one step per token, so the
    effective budget is ``min(max(steps, #blocks), total tokens)``.
    """
    total = sum(lengths)
    steps = min(max(steps, len(lengths)), total)
    out = [1] * len(lengths)
    remaining = steps - len(lengths)
    if remaining:
        room = [n - 1 for n in lengths]
        shares = [remaining * n / total for n in lengths]
        for i in range(len(out)):
            give = min(room[i], int(shares[i]))
            out[i] += give
            room[i] -= give
        left = steps - sum(out)
        # Largest fractional remainder first, ties to the earlier block.
        order = sorted(range(len(out)), key=lambda i: (-(shares[i] - int(shares[i])), i))
        while left:
            for i in order:
                if left and room[i]:
                    out[i] += 1
                    room[i] -= 1
                    left -= 1
    return out


class _Denoiser:
    """Model calls for one generation, with guidance and call counting."""

    def __init__(self, params: ModelParams, prompt: AssembledSequence, config: DecodeConfig,
                 trace: DecodeTrace):
        self.params = params
        self.layout = params.config.vocab
        self.prompt = prompt
        self.trace = trace
        self.guided = prompt.family.generates_image and config.cfg_scale != 1
        self.scale = config.cfg_scale
        allowed = allowed_ids(self.layout, prompt.family)
        self.block_bias = torch.full((self.layout.total_size,), float("-inf"), dtype=torch.float64)
        self.block_bias[torch.from_numpy(allowed)] = 0.0

    def logits(self, tokens: np.ndarray) -> torch.Tensor:
        with torch.no_grad():
            cond = forward(self.params, tokens).to(torch.float64)
            self.trace.forward_calls += 1
            if self.guided:
                seq = unconditional(self.layout, self.prompt.with_tokens(tokens))
                uncond = forward(self.params, seq.tokens).to(torch.float64)
                self.trace.forward_calls += 1
                cond = guided_logits(cond, uncond, self.scale)
        return cond + self.block_bias


def step(
    denoiser: _Denoiser,
    tokens: np.ndarray,
    block: tuple[int, int],
    k: int,
    config: DecodeConfig,
    gen: torch.Generator,
) -> np.ndarray:
    """Predict all masked positions of ``block`` and commit the ``k`` most confident."""
    mask_id = denoiser.layout.mask_id
    a, e = block
    masked = np.flatnonzero(tokens[a:e] == mask_id) + a
    if k > len(masked):
        raise ValueError(f"cannot finalize {k} of {len(masked)} masked positions")
    logits = denoiser.logits(tokens)[torch.from_numpy(masked)]
    probs = torch.softmax(logits, dim=-1)
    if config.temperature == 0:
        chosen = probs.argmax(dim=-1)
    else:
        tempered = torch.softmax(logits / config.temperature, dim=-1)
        chosen = torch.multinomial(tempered, 1, generator=gen)[:, 0]
    if config.remask is Remask.RANDOM:
        conf = torch.rand(len(masked), generator=gen, dtype=torch.float64)
    else:
        conf = probs.gather(-1, chosen[:, None])[:, 0]
    conf = conf.numpy()
    # Highest confidence first; ties go to the lower position.
    keep = np.lexsort((masked, -conf))[:k]
    out = tokens.copy()
    out[masked[keep]] = chosen.numpy()[keep]
    return out


def generate(
    params: ModelParams,
    prompt: AssembledSequence,
    config: DecodeConfig,
    trace: DecodeTrace | None = None,
) -> np.ndarray:
    """Denoise the fully masked target span of ``prompt``; conditioning is never touched."""
    layout = params.config.vocab
    trace = trace if trace is not None else DecodeTrace()
    tokens = np.asarray(prompt.tokens, dtype=np.int64).copy()
    a, e = prompt.target_span
    if e <= a or not np.all(tokens[a:e] == layout.mask_id):
        raise ValueError("target span must be non-empty and fully masked")
    image = prompt.family.generates_image
    schedule = config.schedule or (Schedule.COSINE if image else Schedule.LINEAR)
    blocks = split_blocks((a, e), config.block_length, image)
    budget = apportion_steps([y - x for x, y in blocks], config.steps)
    trace.blocks, trace.steps_per_block = blocks, budget
    gen = torch.Generator().manual_seed(config.seed)
    denoiser = _Denoiser(params, prompt, config, trace)
    for block, n_steps in zip(blocks, budget):
        for k in schedule_counts(block[1] - block[0], n_steps, schedule):
            tokens = step(denoiser, tokens, block, k, config, gen)
            trace.masked_after_step.append(int((tokens[a:e] == layout.mask_id).sum()))
    return tokens
