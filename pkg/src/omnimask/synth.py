"""Toy tokenizers and synthetic paired data.

Stand-ins for the frozen modality tokenizers: a grid image is tokenized one
token per cell in raster order, a video is the concatenation of its frames,
and speech is a run-length code of characters. Everything here is a pure
function of its inputs and an explicit ``numpy.random.Generator``.

Cell codes: ``0`` is background, ``1 + shape * n_colors + color`` is an object.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .vocab import Modality, VocabLayout, modality_of

# Plain text symbols occupy ids [0, len(TEXT_ALPHABET)) of the text range.
TEXT_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789 ,+="
SPEECH_ALPHABET = "abcdefgh"

DIRECTIONS = ("right", "down")
EDIT_OPS = ("recolor", "remove", "add")


# ---------------------------------------------------------------- text


def encode_text(layout: VocabLayout, text: str) -> list[int]:
    limit = min(len(TEXT_ALPHABET), layout.first_special)
    out = []
    for ch in text:
        idx = TEXT_ALPHABET.find(ch)
        if idx < 0 or idx >= limit:
            raise ValueError(f"character {ch!r} is not in the layout's text alphabet")
        out.append(idx)
    return out


def decode_text(layout: VocabLayout, tokens: Sequence[int]) -> str:
    chars = []
    for tok in tokens:
        tok = int(tok)
        if not 0 <= tok < min(len(TEXT_ALPHABET), layout.first_special):
            raise ValueError(f"token {tok} is not a text symbol")
        chars.append(TEXT_ALPHABET[tok])
    return "".join(chars)


def text_symbol_ids(layout: VocabLayout) -> range:
    return range(0, min(len(TEXT_ALPHABET), layout.first_special))


# ---------------------------------------------------------------- images


@dataclass(frozen=True)
class GridImage:
    cells: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        cells = tuple(tuple(int(v) for v in row) for row in self.cells)
        object.__setattr__(self, "cells", cells)
        side = len(cells)
        if side == 0 or any(len(row) != side for row in cells):
            raise ValueError("grid must be square and non-empty")

    @property
    def side(self) -> int:
        return len(self.cells)

    @classmethod
    def from_array(cls, arr) -> "GridImage":
        return cls(tuple(tuple(int(v) for v in row) for row in np.asarray(arr)))

    def to_list(self) -> list[list[int]]:
        return [list(row) for row in self.cells]


@dataclass(frozen=True)
class VideoClip:
    frames: tuple[GridImage, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if not frames:
            raise ValueError("clip needs at least one frame")
        if len({f.side for f in frames}) != 1:
            raise ValueError("all frames must have the same side")


def tokenize_image(layout: VocabLayout, img: GridImage) -> list[int]:
    out = []
    for row in img.cells:
        for v in row:
            if not 0 <= v < layout.vision_size:
                raise ValueError(f"cell index {v} outside [0, {layout.vision_size})")
            out.append(layout.vision_offset + v)
    return out


def detokenize_image(layout: VocabLayout, tokens: Sequence[int], side: int) -> GridImage:
    tokens = [int(t) for t in tokens]
    if len(tokens) != side * side:
        raise ValueError(f"expected {side * side} tokens, got {len(tokens)}")
    for t in tokens:
        if modality_of(layout, t) is not Modality.VISION:
            raise ValueError(f"token {t} is not a vision token")
    vals = [t - layout.vision_offset for t in tokens]
    return GridImage(tuple(tuple(vals[r * side:(r + 1) * side]) for r in range(side)))


def tokenize_video(layout: VocabLayout, clip: VideoClip) -> list[int]:
    out: list[int] = []
    for frame in clip.frames:
        out.extend(tokenize_image(layout, frame))
    return out


# ---------------------------------------------------------------- speech


def tokenize_speech(layout: VocabLayout, text: str, rate: int = 2) -> list[int]:
    """Emit ``rate`` copies of each character's unit id, offset into the speech range."""
    if rate < 1:
        raise ValueError("rate must be >= 1")
    if len(SPEECH_ALPHABET) > layout.speech_size:
        raise ValueError("speech alphabet does not fit in the layout's speech range")
    out = []
    for ch in text:
        unit = SPEECH_ALPHABET.find(ch)
        if unit < 0:
            raise ValueError(f"character {ch!r} outside the speech alphabet")
        out.extend([layout.speech_offset + unit] * rate)
    return out


def detokenize_speech(layout: VocabLayout, tokens: Sequence[int]) -> str:
    """Collapse runs of identical units to one character each.

    Run lengths are not checked, so ``[a, b, b, b]`` decodes like ``[a, a, b, b]``.
    """
    chars = []
    prev = None
    for t in tokens:
        t = int(t)
        if modality_of(layout, t) is not Modality.SPEECH:
            raise ValueError(f"token {t} is not a speech token")
        unit = t - layout.speech_offset
        if unit >= len(SPEECH_ALPHABET):
            raise ValueError(f"speech unit {unit} has no character")
        if t != prev:
            chars.append(SPEECH_ALPHABET[unit])
        prev = t
    return "".join(chars)


def speech_string(rng: np.random.Generator, min_len: int, max_len: int) -> str:
    """Random speech-alphabet string without adjacent repeats (so it survives run collapse)."""
    n = int(rng.integers(min_len, max_len + 1))
    chars: list[str] = []
    for _ in range(n):
        choices = [c for c in SPEECH_ALPHABET if not chars or c != chars[-1]]
        chars.append(choices[int(rng.integers(len(choices)))])
    return "".join(chars)


# ---------------------------------------------------------------- scenes


class SceneObject(NamedTuple):
    shape: int
    color: int
    row: int
    col: int


@dataclass(frozen=True)
class SceneConfig:
    side: int = 3
    min_objects: int = 1
    max_objects: int = 2
    n_shapes: int = 3
    n_colors: int = 5

    def __post_init__(self):
        if self.max_objects > self.side * self.side:
            raise ValueError("more objects than grid cells")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("invalid object count bounds")

    @property
    def vision_size(self) -> int:
        return 1 + self.n_shapes * self.n_colors


@dataclass(frozen=True)
class Scene:
    side: int
    objects: tuple[SceneObject, ...] = ()
    n_colors: int = 5

    def __post_init__(self):
        objs = tuple(sorted((SceneObject(*o) for o in self.objects), key=lambda o: (o.row, o.col)))
        object.__setattr__(self, "objects", objs)
        cells = set()
        for o in objs:
            if not (0 <= o.row < self.side and 0 <= o.col < self.side):
                raise ValueError(f"object {o} outside the {self.side}x{self.side} grid")
            if (o.row, o.col) in cells:
                raise ValueError(f"two objects share cell {(o.row, o.col)}")
            if not 0 <= o.color < self.n_colors:
                raise ValueError(f"color {o.color} outside palette")
            cells.add((o.row, o.col))

    def occupied(self) -> set[tuple[int, int]]:
        return {(o.row, o.col) for o in self.objects}


def cell_code(shape: int, color: int, n_colors: int) -> int:
    return 1 + shape * n_colors + color


def sample_scene(rng: np.random.Generator, config: SceneConfig) -> Scene:
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    cells = rng.choice(config.side * config.side, size=n, replace=False)
    objs = [
        SceneObject(
            int(rng.integers(config.n_shapes)),
            int(rng.integers(config.n_colors)),
            int(c) // config.side,
            int(c) % config.side,
        )
        for c in cells
    ]
    return Scene(config.side, tuple(objs), config.n_colors)


def _describe(o: SceneObject) -> str:
    return f"color{o.color} shape{o.shape} at {o.row} {o.col}"


def caption(scene: Scene) -> str:
    """Row-major listing of objects, e.g. ``"color2 shape0 at 0 1"``."""
    return ", ".join(_describe(o) for o in scene.objects)


def attribute_prompt(scene: Scene) -> str:
    """Position-free description: which objects, not where. Sorted by (color, shape)."""
    items = sorted((o.color, o.shape) for o in scene.objects)
    return ", ".join(f"color{c} shape{s}" for c, s in items)


def parse_attribute_prompt(text: str) -> list[tuple[int, int]]:
    out = []
    for item in filter(None, (p.strip() for p in text.split(","))):
        color, shape = item.split()
        out.append((int(color.removeprefix("color")), int(shape.removeprefix("shape"))))
    return sorted(out)


def render(scene: Scene) -> GridImage:
    grid = np.zeros((scene.side, scene.side), dtype=np.int64)
    for o in scene.objects:
        grid[o.row, o.col] = cell_code(o.shape, o.color, scene.n_colors)
    return GridImage.from_array(grid)


def parse_grid(img: GridImage, n_colors: int = 5) -> Scene:
    """Inverse of :func:`render` for any grid of valid cell codes."""
    objs = []
    for r, row in enumerate(img.cells):
        for c, v in enumerate(row):
            if v:
                shape, color = divmod(v - 1, n_colors)
                objs.append(SceneObject(shape, color, r, c))
    return Scene(img.side, tuple(objs), n_colors)


def animate(scene: Scene, frames: int, direction: str = "right") -> VideoClip:
    """Translate the first object by one cell per frame, wrapping at the border."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    if frames < 1:
        raise ValueError("need at least one frame")
    if not scene.objects:
        return VideoClip(tuple(render(scene) for _ in range(frames)))
    mover, rest = scene.objects[0], scene.objects[1:]
    dr, dc = (0, 1) if direction == "right" else (1, 0)
    out = []
    for t in range(frames):
        moved = mover._replace(
            row=(mover.row + dr * t) % scene.side, col=(mover.col + dc * t) % scene.side
        )
        out.append(render(Scene(scene.side, (moved, *rest), scene.n_colors)))
    return VideoClip(tuple(out))


def video_caption(scene: Scene, direction: str) -> str:
    o = scene.objects[0]
    return f"color{o.color} shape{o.shape} moves {direction}"


def make_edit_pair(
    rng: np.random.Generator, scene: Scene, n_shapes: int = 3, op: str | None = None
) -> tuple[GridImage, str, GridImage]:
    """Apply one edit (recolor | remove | add) and name it in the instruction."""
    free = [
        (r, c)
        for r in range(scene.side)
        for c in range(scene.side)
        if (r, c) not in scene.occupied()
    ]
    allowed = [
        o for o in EDIT_OPS if (o == "add" and free) or (o != "add" and scene.objects)
    ]
    if op is None:
        op = allowed[int(rng.integers(len(allowed)))]
    elif op not in allowed:
        raise ValueError(f"edit {op!r} not applicable to this scene")
    objs = list(scene.objects)
    if op == "add":
        r, c = free[int(rng.integers(len(free)))]
        new = SceneObject(int(rng.integers(n_shapes)), int(rng.integers(scene.n_colors)), r, c)
        objs.append(new)
        instr = f"add color{new.color} shape{new.shape} at {r} {c}"
    else:
        i = int(rng.integers(len(objs)))
        target = objs[i]
        if op == "remove":
            del objs[i]
            instr = f"remove {target.row} {target.col}"
        else:
            colors = [k for k in range(scene.n_colors) if k != target.color]
            color = colors[int(rng.integers(len(colors)))]
            objs[i] = target._replace(color=color)
            instr = f"recolor {target.row} {target.col} to color{color}"
    edited = replace(scene, objects=tuple(objs))
    return render(scene), instr, render(edited)


# ---------------------------------------------------------------- text tasks


def sum_task(rng: np.random.Generator) -> tuple[str, str]:
    """``"sum 7"`` -> any ``"a+b"`` of digits adding to 7; the answer is not unique."""
    n = int(rng.integers(0, 19))
    lo, hi = max(0, n - 9), min(9, n)
    a = int(rng.integers(lo, hi + 1))
    return f"sum {n}", f"{a}+{n - a}"


def reverse_task(rng: np.random.Generator, min_len: int = 3, max_len: int = 5) -> tuple[str, str]:
    n = int(rng.integers(min_len, max_len + 1))
    s = "".join(SPEECH_ALPHABET[int(i)] for i in rng.integers(len(SPEECH_ALPHABET), size=n))
    return f"rev {s}", s[::-1]


def chat_answer_ok(prompt: str, response: str, think: bool = False) -> bool:
    """Verifier for the toy chat tasks (any valid answer counts)."""
    op, _, arg = prompt.partition(" ")
    if op == "rev":
        return response == arg[::-1]
    if op == "sum":
        n = int(arg)
        body = response
        if think:
            body, eq, total = response.partition("=")
            if eq != "=" or total != str(n):
                return False
        a, plus, b = body.partition("+")
        if plus != "+" or len(a) != 1 or len(b) != 1 or not (a + b).isdigit():
            return False
        return int(a) + int(b) == n
    raise ValueError(f"unknown chat prompt {prompt!r}")


def thinking_task(rng: np.random.Generator) -> tuple[str, bool, str]:
    prompt, answer = sum_task(rng)
    think = bool(rng.integers(2))
    if think:
        answer = f"{answer}={prompt.split()[1]}"
    return prompt, think, answer


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class DataConfig:
    """Sizes of the synthetic world for one stage."""

    scene: SceneConfig = field(default_factory=SceneConfig)
    video_frames: int = 2
    video_side: int = 3
    speech_min: int = 2
    speech_max: int = 6
    speech_rate: int = 2
    rev_min: int = 3
    rev_max: int = 5

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        scene = SceneConfig(**d.pop("scene", {}))
        return cls(scene=scene, **d)

    def to_dict(self) -> dict:
        return {
            "scene": {
                "side": self.scene.side,
                "min_objects": self.scene.min_objects,
                "max_objects": self.scene.max_objects,
                "n_shapes": self.scene.n_shapes,
                "n_colors": self.scene.n_colors,
            },
            "video_frames": self.video_frames,
            "video_side": self.video_side,
            "speech_min": self.speech_min,
            "speech_max": self.speech_max,
            "speech_rate": self.speech_rate,
            "rev_min": self.rev_min,
            "rev_max": self.rev_max,
        }


IMAGE_PROMPT = "describe"
VIDEO_PROMPT = "what moves"


def sample_record(rng: np.random.Generator, family: str, config: DataConfig) -> dict:
    """One raw record ``{"family": ..., **parts}``; family is a short task name."""
    sc = config.scene
    if family == "chat":
        prompt, response = (sum_task(rng) if rng.integers(2) else
                            reverse_task(rng, config.rev_min, config.rev_max))
        return {"family": family, "prompt": prompt, "response": response}
    if family == "think":
        prompt, think, response = thinking_task(rng)
        return {"family": family, "prompt": prompt, "think": think, "response": response}
    if family == "i2t":
        scene = sample_scene(rng, sc)
        return {"family": family, "image": render(scene).to_list(),
                "prompt": IMAGE_PROMPT, "response": caption(scene)}
    if family == "t2i":
        scene = sample_scene(rng, sc)
        return {"family": family, "instruction": attribute_prompt(scene),
                "image": render(scene).to_list()}
    if family == "i2i":
        scene = sample_scene(rng, sc)
        src, instr, tgt = make_edit_pair(rng, scene, sc.n_shapes)
        return {"family": family, "source": src.to_list(), "instruction": instr,
                "target": tgt.to_list()}
    if family == "v2t":
        vc = replace(sc, side=config.video_side, min_objects=1, max_objects=1)
        scene = sample_scene(rng, vc)
        direction = DIRECTIONS[int(rng.integers(len(DIRECTIONS)))]
        clip = animate(scene, config.video_frames, direction)
        return {"family": family, "frames": [f.to_list() for f in clip.frames],
                "prompt": VIDEO_PROMPT, "response": video_caption(scene, direction)}
    if family in ("asr", "tts"):
        text = speech_string(rng, config.speech_min, config.speech_max)
        units = [SPEECH_ALPHABET.index(ch) for ch in text for _ in range(config.speech_rate)]
        return {"family": family, "text": text, "units": units}
    raise ValueError(f"unknown family {family!r}")
