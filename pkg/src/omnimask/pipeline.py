"""Stage training, vocabulary extension and per-task evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import vocab as V
from .backbone import (
    AdamWState,
    ModelConfig,
    ModelParams,
    OptimConfig,
    cosine_lr,
    forward_backward,
    init,
    init_tensor,
    optimizer_step,
)
from .checkpoint import Checkpoint
from .diffusion import corrupt, drop_condition
from .sampler import DecodeConfig, DecodeTrace, generate
from .synth import (
    DataConfig,
    GridImage,
    decode_text,
    detokenize_speech,
    chat_answer_ok,
    parse_attribute_prompt,
    parse_grid,
    sample_record,
    tokenize_image,
)
from .templates import (
    STAGE_FAMILIES,
    SPEECH_FAMILIES,
    AssembledSequence,
    Family,
    assemble,
    default_eos_supervised,
    mask_target,
    truncate_at_eos,
)
from .vocab import VocabLayout, extend_with_speech

log = logging.getLogger(__name__)

DEFAULT_CAPACITY = {"text": 32, "speech": 64}


@dataclass(frozen=True)
class StageConfig:
    stage: int
    task_mixture: Mapping[str, float]
    steps: int
    peak_lr: float
    batch_size: int = 32
    seed: int = 0
    capacities: Mapping[str, int] = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    eos_supervised: bool | None = None
    # Explicit opt-in needed to train a stage >= 2 without termination supervision.
    ablation: bool = False
    weight_decay: float = 0.1
    warmup_steps: int = 0
    p_drop: float = 0.1

    def __post_init__(self):
        if self.stage not in STAGE_FAMILIES:
            raise ValueError(f"unknown stage {self.stage}")
        mixture = {Family.parse(k).value: float(w) for k, w in self.task_mixture.items()}
        if not mixture or any(w < 0 for w in mixture.values()) or sum(mixture.values()) <= 0:
            raise ValueError("task mixture needs non-negative weights with positive total")
        for name in mixture:
            fam = Family.parse(name)
            if fam not in STAGE_FAMILIES[self.stage]:
                raise ValueError(f"{fam.name} is not available at stage {self.stage}")
        object.__setattr__(self, "task_mixture", mixture)
        eos = self.eos_supervised
        if eos is None:
            eos = default_eos_supervised(self.stage)
        if self.stage == 1 and eos:
            raise ValueError("stage 1 never supervises <EOS>")
        if self.stage >= 2 and not eos and not self.ablation:
            raise ValueError("stages >= 2 supervise <EOS>; set ablation=true to disable")
        object.__setattr__(self, "eos_supervised", eos)
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    @property
    def families(self) -> list[Family]:
        return [Family.parse(k) for k in self.task_mixture]

    @classmethod
    def from_dict(cls, d: Mapping) -> "StageConfig":
        d = dict(d)
        d.pop("model", None)
        if "data" in d:
            d["data"] = DataConfig.from_dict(d["data"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "task_mixture": dict(self.task_mixture),
            "steps": self.steps,
            "peak_lr": self.peak_lr,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "capacities": dict(self.capacities),
            "data": self.data.to_dict(),
            "eos_supervised": self.eos_supervised,
            "ablation": self.ablation,
            "weight_decay": self.weight_decay,
            "warmup_steps": self.warmup_steps,
            "p_drop": self.p_drop,
        }


def capacity_for(family: Family, capacities: Mapping[str, int]) -> int | None:
    if family.generates_image:
        return None
    if family.value in capacities:
        return int(capacities[family.value])
    key = "speech" if family.generates_speech else "text"
    return int(capacities.get(key, DEFAULT_CAPACITY[key]))


# ---------------------------------------------------------------- records


def _grid(layout: VocabLayout, cells) -> list[int]:
    return tokenize_image(layout, GridImage.from_array(cells))


def record_parts(layout: VocabLayout, record: Mapping) -> tuple[Family, tuple]:
    """Turn a raw dataset record into template parts with unified token ids."""
    fam = Family.parse(record["family"])
    if fam is Family.TextChat:
        return fam, (record["prompt"], record["response"])
    if fam is Family.ThinkingMode:
        return fam, (record["prompt"], bool(record["think"]), record["response"])
    if fam is Family.ImageToText:
        return fam, (_grid(layout, record["image"]), record["prompt"], record["response"])
    if fam is Family.TextToImage:
        return fam, (record["instruction"], _grid(layout, record["image"]))
    if fam is Family.ImageToImage:
        return fam, (_grid(layout, record["source"]), record["instruction"],
                     _grid(layout, record["target"]))
    if fam is Family.VideoToText:
        frames = [_grid(layout, f) for f in record["frames"]]
        return fam, (frames, record["prompt"], record["response"])
    units = [layout.speech_offset + int(u) for u in record["units"]]
    if fam is Family.SpeechToText:
        return fam, (units, record["text"])
    return fam, (record["text"], units)


def record_sequence(layout: VocabLayout, record: Mapping, stage: int,
                    capacities: Mapping[str, int], eos_supervised: bool | None = None
                    ) -> AssembledSequence:
    fam, parts = record_parts(layout, record)
    return assemble(layout, fam, parts, stage, capacity_for(fam, capacities), eos_supervised)


def generate_records(seed: int, counts: Mapping[str, int], data: DataConfig) -> list[dict]:
    """Deterministic synthetic records: ``counts[family]`` of each, in family order."""
    out = []
    for i, (fam, n) in enumerate(counts.items()):
        rng = np.random.default_rng([seed, i, _family_index(fam)])
        out.extend(sample_record(rng, Family.parse(fam).value, data) for _ in range(n))
    return out


def _family_index(name: str) -> int:
    return [f.value for f in Family].index(Family.parse(name).value)


# ---------------------------------------------------------------- training


@dataclass
class StageResult:
    checkpoint: Checkpoint
    losses: list[tuple[int, float, float]]   # (step, loss, lr)


def _record_stream(config: StageConfig, data: Mapping[str, Sequence[dict]] | None,
                   rng: np.random.Generator) -> Callable[[str], dict]:
    if data is None:
        return lambda fam: sample_record(rng, fam, config.data)

    def pick(fam: str) -> dict:
        pool = data[fam]
        return pool[int(rng.integers(len(pool)))]
    return pick


def run_stage(
    config: StageConfig,
    init_ckpt: Checkpoint,
    data: Mapping[str, Sequence[dict]] | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> StageResult:
    """Run ``config.steps`` AdamW steps on batches mixed over the task mixture.

    ``data`` maps family names to record pools; when omitted, records are
    sampled on the fly from ``config.data``. Optimizer state starts fresh.
    """
    layout = init_ckpt.layout
    needs_speech = any(f in SPEECH_FAMILIES for f in config.families)
    if needs_speech and layout.speech_size == 0:
        raise ValueError("speech tasks need a checkpoint with a speech vocabulary "
                         "(extend or merge the backbone first)")
    ss = np.random.SeedSequence(config.seed)
    data_rng, mix_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    names = list(config.task_mixture)
    weights = np.asarray([config.task_mixture[n] for n in names], dtype=np.float64)
    weights /= weights.sum()
    records = _record_stream(config, data, data_rng)
    opt = OptimConfig(config.peak_lr, config.steps, weight_decay=config.weight_decay,
                      warmup_steps=config.warmup_steps)
    params = init_ckpt.params
    state = AdamWState()
    losses = []
    for step_idx in range(config.steps):
        items = []
        for fam in mix_rng.choice(len(names), size=config.batch_size, p=weights):
            rec = records(names[fam])
            seq = record_sequence(layout, rec, config.stage, config.capacities,
                                  config.eos_supervised)
            if seq.family.generates_image and config.p_drop > 0:
                seq = drop_condition(noise_rng, layout, seq, config.p_drop)
            items.append((seq, corrupt(noise_rng, layout, seq)))
        loss_value, grads = forward_backward(params, items)
        if not math.isfinite(loss_value):
            raise FloatingPointError(f"non-finite loss at step {step_idx}")
        lr = cosine_lr(step_idx, opt)
        params, state = optimizer_step(params, grads, state, step_idx, opt)
        losses.append((step_idx, loss_value, lr))
        if progress is not None:
            progress(step_idx, loss_value)
    meta = dict(init_ckpt.meta)
    meta.update({"stage": config.stage, "step": config.steps, "seed": config.seed})
    return StageResult(Checkpoint(params, meta), losses)


def init_checkpoint(config: ModelConfig) -> Checkpoint:
    return Checkpoint(init(config), {"stage": None, "step": 0, "seed": config.seed})


def vocab_extension_init(ckpt: Checkpoint, speech_size: int, seed: int) -> Checkpoint:
    """Append ``speech_size`` fresh embedding rows and head columns; copy everything else."""
    layout = extend_with_speech(ckpt.layout, speech_size)
    config = ckpt.config.with_vocab(layout)
    rng = np.random.default_rng(seed)
    dim = config.dim
    new_rows = torch.tensor(init_tensor(rng, "embed", (speech_size, dim), dim), dtype=torch.float32)
    new_cols = torch.tensor(init_tensor(rng, "head", (dim, speech_size), dim), dtype=torch.float32)
    tensors = dict(ckpt.params.tensors)
    tensors["embed"] = torch.cat([ckpt.params["embed"], new_rows], dim=0)
    tensors["head"] = torch.cat([ckpt.params["head"], new_cols], dim=1)
    meta = dict(ckpt.meta)
    meta["extended_from"] = ckpt.layout.total_size
    return Checkpoint(ModelParams(config, tensors), meta)


# ---------------------------------------------------------------- evaluation


def levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def char_error_rate(hyp: str, ref: str) -> float:
    """Edit distance normalized by the longer string, so it stays in [0, 1]."""
    denom = max(len(hyp), len(ref))
    return levenshtein(hyp, ref) / denom if denom else 0.0


def _text_of(layout: VocabLayout, target: np.ndarray) -> str:
    kept = truncate_at_eos(layout, target)
    try:
        return decode_text(layout, kept)
    except ValueError:
        return "\x00"  # never matches a reference


def speech_units_of(layout: VocabLayout, target: np.ndarray) -> list[int]:
    """Generated utterance: everything before the first ``<EOS>`` / ``<|endofspeech|>``."""
    end = layout.special(V.END_SPEECH)
    out = []
    for t in truncate_at_eos(layout, target):
        if t == end:
            break
        out.append(t)
    return out


@dataclass
class EvalReport:
    records: list[dict] = field(default_factory=list)

    def add(self, task: str, metric: str, value: float, n: int) -> None:
        self.records.append({"task": task, "metric": metric, "value": float(value), "n": int(n)})

    def get(self, task: str, metric: str) -> float:
        for r in self.records:
            if r["task"] == task and r["metric"] == metric:
                return r["value"]
        raise KeyError((task, metric))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "EvalReport":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])


def default_decode_config(family: Family, target_len: int) -> DecodeConfig:
    """One token per step over a single block for text and speech targets,
    and a cosine schedule for images. At these span lengths one block beats
    short blocks: a caption's easy tokens settle before its object count does."""
    if family.generates_image:
        return DecodeConfig(steps=max(1, target_len), schedule="cosine")
    return DecodeConfig(steps=target_len, block_length=target_len)


def check_decode_config(family: Family, config: DecodeConfig, target_len: int) -> None:
    if family.generates_image and config.block_length is not None \
            and config.block_length < target_len:
        raise ValueError("image targets are decoded as a single block")
    if not family.generates_image and config.cfg_scale != 1:
        raise ValueError("classifier-free guidance is only used for image generation")


def evaluate(
    params: ModelParams,
    suite: Sequence[Mapping],
    stage: int = 3,
    capacities: Mapping[str, int] | None = None,
    decode: Mapping[str, DecodeConfig] | None = None,
    n_colors: int = 5,
) -> EvalReport:
    """Decode every suite record and score it; returns per-task metric records."""
    layout = params.config.vocab
    capacities = capacities or {}
    decode = decode or {}
    by_family: dict[Family, list[Mapping]] = {}
    for rec in suite:
        by_family.setdefault(Family.parse(rec["family"]), []).append(rec)
    report = EvalReport()
    eval_stage = max(stage, 2)
    for fam in Family:
        recs = by_family.get(fam)
        if not recs:
            continue
        scores: dict[str, list[float]] = {}
        calls = 0
        for i, rec in enumerate(recs):
            seq = record_sequence(layout, rec, 3 if fam is Family.ThinkingMode else eval_stage,
                                  capacities)
            a, e = seq.target_span
            cfg = decode.get(fam.value) or default_decode_config(fam, e - a)
            check_decode_config(fam, cfg, e - a)
            trace = DecodeTrace()
            out = generate(params, mask_target(layout, seq), cfg, trace)
            calls += trace.forward_calls
            for k, v in score_output(layout, fam, rec, out[a:e], seq.target, n_colors).items():
                scores.setdefault(k, []).append(v)
        for metric, vals in scores.items():
            report.add(fam.value, metric, float(np.mean(vals)), len(vals))
        report.add(fam.value, "forward_calls", calls, len(recs))
    return report


def score_output(layout: VocabLayout, fam: Family, rec: Mapping, pred: np.ndarray,
                 ref: np.ndarray, n_colors: int = 5) -> dict[str, float]:
    if fam in (Family.TextChat, Family.ThinkingMode):
        text = _text_of(layout, pred)
        think = fam is Family.ThinkingMode and bool(rec["think"])
        return {"exact_match": float(chat_answer_ok(rec["prompt"], text, think))}
    if fam in (Family.ImageToText, Family.VideoToText, Family.SpeechToText):
        text = _text_of(layout, pred)
        truth = rec["text"] if fam is Family.SpeechToText else rec["response"]
        return {"exact_match": float(text == truth), "cer": char_error_rate(text, truth)}
    if fam is Family.TextToSpeech:
        units = speech_units_of(layout, pred)
        ref_units = len(rec["units"])
        try:
            text = detokenize_speech(layout, units)
        except ValueError:
            text = ""
        return {
            "cer": char_error_rate(text, rec["text"]),
            "exact_match": float(text == rec["text"]),
            "length_accuracy": float(abs(len(units) - ref_units) <= 1),
        }
    side = math.isqrt(len(ref))
    token_acc = float(np.mean(pred == ref))
    if fam is Family.TextToImage:
        cells = np.asarray(pred).reshape(side, side) - layout.vision_offset
        scene = parse_grid(GridImage.from_array(cells), n_colors)
        got = sorted((o.color, o.shape) for o in scene.objects)
        want = parse_attribute_prompt(rec["instruction"])
        return {"scene_match": float(got == want), "token_accuracy": token_acc}
    return {"exact_match": float(np.array_equal(pred, ref)), "token_accuracy": token_acc}
