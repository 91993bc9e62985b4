"""Bidirectional transformer denoiser over the unified vocabulary.

Parameters are a flat map of named tensors so that checkpoints and merging can
address the vocabulary-dependent tensors (``embed`` rows, ``head`` columns)
directly. Gradients come from torch autograd on the functional forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .vocab import VocabLayout

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    dim: int
    layers: int
    heads: int
    max_len: int
    vocab: VocabLayout
    seed: int = 0

    def __post_init__(self):
        if self.dim <= 0 or self.heads <= 0 or self.layers < 0 or self.max_len <= 0:
            raise ValueError("dim, heads and max_len must be positive, layers >= 0")
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")

    def with_vocab(self, vocab: VocabLayout) -> "ModelConfig":
        return ModelConfig(self.dim, self.layers, self.heads, self.max_len, vocab, self.seed)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "layers": self.layers, "heads": self.heads,
                "max_len": self.max_len, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: Mapping, vocab: VocabLayout) -> "ModelConfig":
        return cls(int(d["dim"]), int(d["layers"]), int(d["heads"]), int(d["max_len"]),
                   vocab, int(d.get("seed", 0)))


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v = config.dim, config.vocab.total_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d), "pos": (config.max_len, d)}
    for i in range(config.layers):
        p = f"layer{i}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "Wq": (d, d), p + "Wk": (d, d), p + "Wv": (d, d), p + "Wo": (d, d),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "W1": (d, 4 * d), p + "W2": (4 * d, d),
        })
    shapes.update({"ln_f.gain": (d,), "ln_f.bias": (d,), "head": (d, v)})
    return shapes


class ModelParams(Mapping[str, torch.Tensor]):
    """Named tensors plus the config that gives them meaning."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, torch.Tensor]):
        expected = param_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ValueError(f"parameter names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise ValueError(f"{name}: shape {tuple(tensors[name].shape)} != {shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def to(self, dtype: torch.dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.to(dtype) for k, v in self.tensors.items()})

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.clone() for k, v in self.tensors.items()})

    def replace(self, **updates: torch.Tensor) -> "ModelParams":
        return ModelParams(self.config, {**self.tensors, **updates})

    def equal(self, other: "ModelParams") -> bool:
        return set(self) == set(other) and all(
            torch.equal(self[k], other[k]) for k in self
        )


def init_tensor(rng: np.random.Generator, name: str, shape: tuple[int, ...], dim: int) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    return rng.normal(0.0, 1.0 / math.sqrt(dim), size=shape)


def init(config: ModelConfig, dtype: torch.dtype = torch.float32) -> ModelParams:
    """Deterministic initialization from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    tensors = {
        name: torch.tensor(init_tensor(rng, name, shape, config.dim), dtype=dtype)
        for name, shape in param_shapes(config).items()
    }
    return ModelParams(config, tensors)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], gain, bias, LN_EPS)


def forward(
    params: Mapping[str, torch.Tensor] | ModelParams,
    tokens,
    key_mask: torch.Tensor | None = None,
    config: ModelConfig | None = None,
    capture: dict | None = None,
) -> torch.Tensor:
    """Logits ``[..., L, total_size]`` for a sequence ``[L]`` or a batch ``[B, L]``.

    ``key_mask`` (``[B, L]`` bool, True = real token) hides right padding from
    attention. There is no causal mask. When ``capture`` is a dict, per-layer
    attention probabilities are stored under ``"attn"``.
    """
    config = config or params.config
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    single = tokens.dim() == 1
    if single:
        tokens = tokens[None]
    B, L = tokens.shape
    if L > config.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len {config.max_len}")
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= config.vocab.total_size):
        raise ValueError("token id outside the vocabulary")

    H, D = config.heads, config.dim
    hd = D // H
    x = params["embed"][tokens] + params["pos"][:L]
    bias = None
    if key_mask is not None:
        bias = torch.zeros(B, 1, 1, L, dtype=x.dtype)
        bias = bias.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    attn_log = [] if capture is not None else None
    for i in range(config.layers):
        p = f"layer{i}."
        h = layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
        q = (h @ params[p + "Wq"]).view(B, L, H, hd).transpose(1, 2)
        k = (h @ params[p + "Wk"]).view(B, L, H, hd).transpose(1, 2)
        v = (h @ params[p + "Wv"]).view(B, L, H, hd).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        if bias is not None:
            scores = scores + bias
        att = torch.softmax(scores, dim=-1)
        if attn_log is not None:
            attn_log.append(att.detach())
        y = (att @ v).transpose(1, 2).reshape(B, L, D)
        x = x + y @ params[p + "Wo"]
        h = layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
        x = x + F.gelu(h @ params[p + "W1"]) @ params[p + "W2"]
    x = layer_norm(x, params["ln_f.gain"], params["ln_f.bias"])
    logits = x @ params["head"]
    if capture is not None:
        capture["attn"] = attn_log
    return logits[0] if single else logits


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    """Right-padded tensors for a list of corrupted sequences."""

    inputs: torch.Tensor       # [B, L] corrupted tokens
    targets: torch.Tensor      # [B, L] clean tokens
    contrib: torch.Tensor      # [B, L] masked AND supervised
    key_mask: torch.Tensor     # [B, L] real (non-pad) positions
    inv_t: torch.Tensor        # [B]


def make_batch(items: Sequence, pad_id: int) -> Batch:
    """``items`` are ``(AssembledSequence, CorruptionDraw)`` pairs."""
    if not items:
        raise ValueError("empty batch")
    L = max(len(seq) for seq, _ in items)
    B = len(items)
    inputs = np.full((B, L), pad_id, dtype=np.int64)
    targets = np.full((B, L), pad_id, dtype=np.int64)
    contrib = np.zeros((B, L), dtype=bool)
    key_mask = np.zeros((B, L), dtype=bool)
    inv_t = np.empty(B, dtype=np.float64)
    for b, (seq, draw) in enumerate(items):
        n = len(seq)
        inputs[b, :n] = draw.corrupted
        targets[b, :n] = seq.tokens
        contrib[b, :n] = draw.mask & seq.supervised
        key_mask[b, :n] = True
        inv_t[b] = 1.0 / draw.t
        if not contrib[b].any():
            raise ValueError(f"batch element {b} has no masked supervised position")
    return Batch(torch.from_numpy(inputs), torch.from_numpy(targets), torch.from_numpy(contrib),
                 torch.from_numpy(key_mask), torch.from_numpy(inv_t))


def batch_loss(params: Mapping[str, torch.Tensor], batch: Batch, config: ModelConfig) -> torch.Tensor:
    """Mean over the batch of ``(1/t) * sum_{masked & supervised} -log p(x0_i | x_t)``."""
    all_real = bool(batch.key_mask.all())
    logits = forward(params, batch.inputs, None if all_real else batch.key_mask, config)
    logp = torch.log_softmax(logits.to(torch.float64), dim=-1)
    nll = -logp.gather(-1, batch.targets[..., None])[..., 0]
    per_seq = (nll * batch.contrib).sum(dim=1) * batch.inv_t
    return per_seq.mean()


def forward_backward(params: ModelParams, items: Sequence) -> tuple[float, dict[str, torch.Tensor]]:
    """Batch-mean masked-diffusion loss and its exact gradient w.r.t. every tensor."""
    batch = make_batch(items, params.config.vocab.eos_id)
    leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    loss = batch_loss(leaves, batch, params.config)
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[k] for k in names])
    return float(loss.detach()), {k: g.to(params[k].dtype) for k, g in zip(names, grads)}


# ---------------------------------------------------------------- optimizer


@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float
    total_steps: int
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    warmup_steps: int = 0


@dataclass
class AdamWState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


def cosine_lr(position: int, config: OptimConfig) -> float:
    """Linear warmup (if any), then cosine decay from ``peak_lr`` to zero."""
    if config.warmup_steps and position < config.warmup_steps:
        return config.peak_lr * (position + 1) / config.warmup_steps
    span = max(1, config.total_steps - config.warmup_steps)
    frac = min(1.0, (position - config.warmup_steps) / span)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_by_global_norm(grads: Mapping[str, torch.Tensor], max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite gradient")
    scale = min(1.0, max_norm / norm) if norm > 0 else 1.0
    return {k: g * scale for k, g in grads.items()}, norm


def decays(name: str) -> bool:
    # Gains and biases are exempt from weight decay.
    return not (name.endswith(".gain") or name.endswith(".bias"))


def optimizer_step(
    params: ModelParams,
    grads: Mapping[str, torch.Tensor],
    state: AdamWState,
    position: int,
    config: OptimConfig,
) -> tuple[ModelParams, AdamWState]:
    """AdamW with global-norm clipping and decoupled weight decay."""
    if set(grads) != set(params):
        raise ValueError("gradient names do not match parameters")
    grads, _ = clip_by_global_norm(grads, config.clip_norm)
    lr = cosine_lr(position, config)
    step = state.step + 1
    b1, b2 = config.beta1, config.beta2
    new, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != {tuple(p.shape)}")
        m = state.m.get(name, torch.zeros_like(p)) * b1 + (1 - b1) * g
        v = state.v.get(name, torch.zeros_like(p)) * b2 + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        upd = p
        if config.weight_decay and decays(name):
            upd = upd * (1 - lr * config.weight_decay)
        new[name] = upd - lr * m_hat / (v_hat.sqrt() + config.eps)
        m_out[name], v_out[name] = m, v
    return ModelParams(params.config, new), AdamWState(m_out, v_out, step)
