"""Input-output templates that turn task parts into supervised token sequences.

Every family lays out fixed conditioning tokens followed by a target region.
Only the target region is corruptible. Inside it, content tokens are always
supervised while termination tokens (``<EOS>`` padding, and the closing
``<|endofspeech|>`` of a generated utterance) are supervised only when the
stage trains length prediction.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import vocab as V
from .synth import (
    GridImage,
    encode_text,
    tokenize_image,
)
from .vocab import VocabLayout


class Family(enum.Enum):
    VideoToText = "v2t"
    SpeechToText = "asr"
    TextToSpeech = "tts"
    TextChat = "chat"
    ImageToText = "i2t"
    TextToImage = "t2i"
    ImageToImage = "i2i"
    ThinkingMode = "think"

    @classmethod
    def parse(cls, name: "str | Family") -> "Family":
        if isinstance(name, Family):
            return name
        for fam in cls:
            if name in (fam.value, fam.name):
                return fam
        valid = ", ".join(f.value for f in cls)
        raise ValueError(f"unknown family {name!r}; valid: {valid}")

    @property
    def generates_image(self) -> bool:
        return self in (Family.TextToImage, Family.ImageToImage)

    @property
    def generates_speech(self) -> bool:
        return self is Family.TextToSpeech


STAGE1_FAMILIES = frozenset({Family.VideoToText, Family.SpeechToText, Family.TextToSpeech})
BACKBONE_FAMILIES = frozenset(
    {Family.TextChat, Family.ImageToText, Family.TextToImage, Family.ImageToImage}
)
STAGE2_FAMILIES = STAGE1_FAMILIES | BACKBONE_FAMILIES

# Stage 0 is backbone pretraining on the text+vision vocabulary.
STAGE_FAMILIES = {
    0: BACKBONE_FAMILIES,
    1: STAGE1_FAMILIES,
    2: STAGE2_FAMILIES,
    3: STAGE2_FAMILIES | {Family.ThinkingMode},
}

SPEECH_FAMILIES = frozenset({Family.SpeechToText, Family.TextToSpeech})


def check_stage(family: Family, stage: int) -> None:
    if stage not in STAGE_FAMILIES:
        raise ValueError(f"unknown stage {stage}")
    if family not in STAGE_FAMILIES[stage]:
        raise ValueError(f"{family.name} is not trained at stage {stage}")


def default_eos_supervised(stage: int) -> bool:
    return stage != 1


@dataclass(frozen=True)
class AssembledSequence:
    tokens: np.ndarray
    supervised: np.ndarray
    corruptible: np.ndarray
    family: Family
    target_span: tuple[int, int]
    # Text conditioning content (caption / instruction) that guidance may drop.
    condition_span: tuple[int, int] | None = None

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def target(self) -> np.ndarray:
        a, b = self.target_span
        return self.tokens[a:b]

    def with_tokens(self, tokens: np.ndarray) -> "AssembledSequence":
        return replace(self, tokens=np.asarray(tokens, dtype=np.int64))


class _Builder:
    def __init__(self, layout: VocabLayout):
        self.layout = layout
        self.tokens: list[int] = []
        self.supervised: list[bool] = []
        self.corruptible: list[bool] = []
        self.target_start = self.target_end = None
        self.cond = None

    def fixed(self, *ids: int) -> None:
        for t in ids:
            self.tokens.append(int(t))
            self.supervised.append(False)
            self.corruptible.append(False)

    def special(self, *names: str) -> None:
        self.fixed(*(self.layout.special(n) for n in names))

    def text(self, s: str, condition: bool = False) -> None:
        start = len(self.tokens)
        self.fixed(*encode_text(self.layout, s))
        if condition:
            self.cond = (start, len(self.tokens))

    def target(self, content: Sequence[int], terminators: Sequence[int], capacity: int | None,
               eos_supervised: bool) -> None:
        n = len(content) + len(terminators)
        if capacity is None:
            capacity = n
        if n > capacity:
            raise ValueError(f"target of length {n} exceeds capacity {capacity}")
        pad = [self.layout.eos_id] * (capacity - n)
        self.target_start = len(self.tokens)
        for t in content:
            self.tokens.append(int(t))
            self.supervised.append(True)
            self.corruptible.append(True)
        for t in list(terminators) + pad:
            self.tokens.append(int(t))
            self.supervised.append(eos_supervised)
            self.corruptible.append(True)
        self.target_end = len(self.tokens)

    def build(self, family: Family) -> AssembledSequence:
        return AssembledSequence(
            tokens=np.asarray(self.tokens, dtype=np.int64),
            supervised=np.asarray(self.supervised, dtype=bool),
            corruptible=np.asarray(self.corruptible, dtype=bool),
            family=family,
            target_span=(self.target_start, self.target_end),
            condition_span=self.cond,
        )


def _image_tokens(layout: VocabLayout, img) -> list[int]:
    if isinstance(img, GridImage):
        return tokenize_image(layout, img)
    return [int(t) for t in img]


def assemble(
    layout: VocabLayout,
    family: Family | str,
    parts: Sequence,
    stage: int,
    target_capacity: int | None = None,
    eos_supervised: bool | None = None,
) -> AssembledSequence:
    """Lay out one training/inference sequence for ``family``.

    ``parts`` per family (token lists are already offset into the unified vocabulary;
    images may also be given as :class:`GridImage`):

    ======== ==========================================
    v2t      (frames: list of token lists, prompt, response)
    asr      (speech tokens, text)
    tts      (text, speech tokens)
    chat     (prompt, response)
    i2t      (image, prompt, response)
    t2i      (instruction, image)
    i2i      (source image, instruction, target image)
    think    (prompt, think: bool, response)
    ======== ==========================================

    ``eos_supervised`` defaults to the stage rule and may only be switched off
    explicitly (for ablations); stage 1 never supervises termination.
    """
    family = Family.parse(family)
    check_stage(family, stage)
    if eos_supervised is None:
        eos_supervised = default_eos_supervised(stage)
    elif eos_supervised and stage == 1:
        raise ValueError("termination tokens are never supervised at stage 1")

    b = _Builder(layout)
    eos_only: list[int] = []

    def text_target(s: str) -> None:
        b.target(encode_text(layout, s), eos_only, target_capacity, eos_supervised)

    if family is Family.VideoToText:
        frames, prompt, response = parts
        for frame in frames:
            b.special(V.IMAGE)
            b.fixed(*_image_tokens(layout, frame))
        b.special(V.USER)
        b.text(prompt)
        b.special(V.ASSISTANT)
        text_target(response)
    elif family is Family.SpeechToText:
        units, text = parts
        b.special(V.START_SPEECH)
        b.fixed(*units)
        b.special(V.END_SPEECH, V.START_TEXT)
        text_target(text)
    elif family is Family.TextToSpeech:
        text, units = parts
        b.special(V.START_TEXT)
        b.text(text)
        b.special(V.END_TEXT, V.START_SPEECH)
        b.target(units, [layout.special(V.END_SPEECH)], target_capacity, eos_supervised)
    elif family is Family.TextChat:
        prompt, response = parts
        b.special(V.USER)
        b.text(prompt)
        b.special(V.ASSISTANT)
        text_target(response)
    elif family is Family.ThinkingMode:
        prompt, think, response = parts
        b.special(V.USER)
        b.text(prompt)
        b.special(V.THINK if think else V.NO_THINK, V.ASSISTANT)
        text_target(response)
    elif family is Family.ImageToText:
        image, prompt, response = parts
        b.special(V.IMAGE)
        b.fixed(*_image_tokens(layout, image))
        b.special(V.USER)
        b.text(prompt)
        b.special(V.ASSISTANT)
        text_target(response)
    elif family is Family.TextToImage:
        instruction, image = parts
        b.special(V.START_TEXT)
        b.text(instruction, condition=True)
        b.special(V.END_TEXT)
        _image_target(b, _image_tokens(layout, image), target_capacity)
    elif family is Family.ImageToImage:
        source, instruction, target = parts
        b.special(V.IMAGE)
        b.fixed(*_image_tokens(layout, source))
        b.special(V.START_TEXT)
        b.text(instruction, condition=True)
        b.special(V.END_TEXT)
        _image_target(b, _image_tokens(layout, target), target_capacity)
    return b.build(family)


def _image_target(b: _Builder, image: list[int], capacity: int | None) -> None:
    # Image spans have exact length and carry no <EOS>.
    if capacity is not None and capacity != len(image):
        raise ValueError(f"image target has {len(image)} tokens, capacity {capacity}")
    b.target(image, [], None, True)


def mask_target(layout: VocabLayout, seq: AssembledSequence) -> AssembledSequence:
    """Inference prompt: the same sequence with its whole target span set to MASK."""
    tokens = seq.tokens.copy()
    a, e = seq.target_span
    tokens[a:e] = layout.mask_id
    return seq.with_tokens(tokens)


def truncate_at_eos(layout: VocabLayout, tokens: Sequence[int]) -> list[int]:
    out = []
    for t in tokens:
        if int(t) == layout.eos_id:
            break
        out.append(int(t))
    return out
