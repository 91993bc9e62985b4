"""Unified discrete token space shared by text, vision and speech.

Ids are laid out as three contiguous ranges::

    [0, text_size) | [text_size, text_size + vision_size) | [.., total_size)

Special tokens (MASK, EOS, role delimiters, ...) occupy the top of the text
range so that appending a speech range never moves an existing id.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping

MASK = "MASK"
EOS = "EOS"
USER = "<|user|>"
ASSISTANT = "<|assistant|>"
IMAGE = "<image>"
START_TEXT = "<|startoftext|>"
END_TEXT = "<|endoftext|>"
START_SPEECH = "<|startofspeech|>"
END_SPEECH = "<|endofspeech|>"
THINK = "\\think"
NO_THINK = "\\no_think"

STANDARD_SPECIALS: tuple[str, ...] = (
    MASK,
    EOS,
    USER,
    ASSISTANT,
    IMAGE,
    START_TEXT,
    END_TEXT,
    START_SPEECH,
    END_SPEECH,
    THINK,
    NO_THINK,
)


class Modality(enum.Enum):
    TEXT = "text"
    VISION = "vision"
    SPEECH = "speech"


@dataclass(frozen=True)
class VocabLayout:
    text_size: int
    vision_size: int
    speech_size: int
    special_names: tuple[str, ...] = field(default=STANDARD_SPECIALS)

    def __post_init__(self):
        if self.text_size <= 0:
            raise ValueError("text_size must be positive")
        if self.vision_size < 0 or self.speech_size < 0:
            raise ValueError("range sizes must be non-negative")
        names = tuple(self.special_names)
        object.__setattr__(self, "special_names", names)
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate special names: {dupes}")
        for required in (MASK, EOS):
            if required not in names:
                raise ValueError(f"layout needs a {required} special token")
        if len(names) > self.text_size:
            raise ValueError(
                f"text_size={self.text_size} cannot house {len(names)} special tokens"
            )

    @property
    def total_size(self) -> int:
        return self.text_size + self.vision_size + self.speech_size

    @property
    def vision_offset(self) -> int:
        return self.text_size

    @property
    def speech_offset(self) -> int:
        return self.text_size + self.vision_size

    @property
    def first_special(self) -> int:
        """Lowest special id; plain text symbols live in ``[0, first_special)``."""
        return self.text_size - len(self.special_names)

    @property
    def specials(self) -> Mapping[str, int]:
        base = self.first_special
        return {name: base + i for i, name in enumerate(self.special_names)}

    def special(self, name: str) -> int:
        try:
            return self.first_special + self.special_names.index(name)
        except ValueError:
            raise KeyError(f"layout has no special token {name!r}") from None

    @property
    def mask_id(self) -> int:
        return self.special(MASK)

    @property
    def eos_id(self) -> int:
        return self.special(EOS)

    def range_of(self, modality: Modality) -> range:
        if modality is Modality.TEXT:
            return range(0, self.text_size)
        if modality is Modality.VISION:
            return range(self.vision_offset, self.speech_offset)
        return range(self.speech_offset, self.total_size)

    def to_dict(self) -> dict:
        return {
            "text_size": self.text_size,
            "vision_size": self.vision_size,
            "speech_size": self.speech_size,
            "special_names": list(self.special_names),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "VocabLayout":
        return cls(
            int(d["text_size"]),
            int(d["vision_size"]),
            int(d["speech_size"]),
            tuple(d["special_names"]),
        )


def build_layout(
    text_size: int,
    vision_size: int = 0,
    speech_size: int = 0,
    special_names: Iterable[str] = STANDARD_SPECIALS,
) -> VocabLayout:
    """Build a validated layout; special ids fill the top of the text range in order."""
    return VocabLayout(text_size, vision_size, speech_size, tuple(special_names))


def modality_of(layout: VocabLayout, token_id: int) -> Modality:
    if not 0 <= token_id < layout.total_size:
        raise ValueError(f"token id {token_id} outside [0, {layout.total_size})")
    if token_id < layout.text_size:
        return Modality.TEXT
    if token_id < layout.speech_offset:
        return Modality.VISION
    return Modality.SPEECH


def extend_with_speech(base: VocabLayout, speech_size: int) -> VocabLayout:
    """Append a speech range after the existing text and vision ranges."""
    if base.speech_size:
        raise ValueError("layout already has a speech range")
    if speech_size <= 0:
        raise ValueError("speech_size must be positive")
    return VocabLayout(base.text_size, base.vision_size, speech_size, base.special_names)
