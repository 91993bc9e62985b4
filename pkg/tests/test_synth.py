import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from omnimask.synth import (
    SPEECH_ALPHABET,
    GridImage,
    Scene,
    SceneConfig,
    SceneObject,
    VideoClip,
    animate,
    attribute_prompt,
    caption,
    decode_text,
    detokenize_image,
    detokenize_speech,
    encode_text,
    make_edit_pair,
    parse_attribute_prompt,
    parse_grid,
    render,
    sample_record,
    sample_scene,
    DataConfig,
    chat_answer_ok,
    speech_string,
    tokenize_image,
    tokenize_speech,
    tokenize_video,
)
from omnimask.vocab import Modality, modality_of


def test_tokenize_image_examples(toy_layout):
    assert tokenize_image(toy_layout, GridImage(((0, 1), (2, 3)))) == [32, 33, 34, 35]
    assert tokenize_image(toy_layout, GridImage(((5,),))) == [37]
    with pytest.raises(ValueError):
        tokenize_image(toy_layout, GridImage(((16,),)))


def test_detokenize_image_examples(toy_layout):
    assert detokenize_image(toy_layout, [32, 33, 34, 35], 2) == GridImage(((0, 1), (2, 3)))
    with pytest.raises(ValueError):
        detokenize_image(toy_layout, [3, 33, 34, 35], 2)
    with pytest.raises(ValueError):
        detokenize_image(toy_layout, [32, 33, 34], 2)


def test_image_round_trip_random_grids(toy_layout):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        side = int(rng.integers(1, 6))
        img = GridImage.from_array(rng.integers(0, 16, size=(side, side)))
        toks = tokenize_image(toy_layout, img)
        assert len(toks) == side * side
        assert all(modality_of(toy_layout, t) is Modality.VISION for t in toks)
        assert detokenize_image(toy_layout, toks, side) == img
        assert tokenize_image(toy_layout, detokenize_image(toy_layout, toks, side)) == toks


def test_tokenize_video(toy_layout):
    frame = GridImage(((1, 2), (3, 4)))
    assert tokenize_video(toy_layout, VideoClip((frame,))) == tokenize_image(toy_layout, frame)
    clip = VideoClip((GridImage(((0,),)), GridImage(((1,),))))
    assert tokenize_video(toy_layout, clip) == [32, 33]
    assert len(tokenize_video(toy_layout, VideoClip((frame,) * 8))) == 32
    with pytest.raises(ValueError):
        VideoClip((frame, GridImage(((1,),))))


def test_speech_examples(toy_layout):
    assert tokenize_speech(toy_layout, "ab", rate=2) == [48, 48, 49, 49]
    assert tokenize_speech(toy_layout, "", rate=3) == []
    assert detokenize_speech(toy_layout, [48, 48, 49, 49]) == "ab"
    assert detokenize_speech(toy_layout, [48, 49, 49, 49]) == "ab"
    assert detokenize_speech(toy_layout, []) == ""
    with pytest.raises(ValueError):
        tokenize_speech(toy_layout, "z")
    with pytest.raises(ValueError):
        detokenize_speech(toy_layout, [3])


no_repeat_strings = st.lists(st.sampled_from(SPEECH_ALPHABET), max_size=64).map(
    lambda cs: "".join(c for i, c in enumerate(cs) if i == 0 or c != cs[i - 1])
)


@given(no_repeat_strings, st.integers(1, 4))
def test_speech_round_trip(toy_layout_hyp, text, rate):
    toks = tokenize_speech(toy_layout_hyp, text, rate)
    assert len(toks) == rate * len(text)
    assert all(modality_of(toy_layout_hyp, t) is Modality.SPEECH for t in toks)
    assert detokenize_speech(toy_layout_hyp, toks) == text


@pytest.fixture(scope="module")
def toy_layout_hyp():
    from omnimask.vocab import build_layout
    return build_layout(32, 16, 8)


def test_speech_string_has_no_adjacent_repeats(rng):
    for _ in range(200):
        s = speech_string(rng, 1, 12)
        assert all(a != b for a, b in zip(s, s[1:]))


def test_text_codec(toy_layout, train_layout):
    assert decode_text(train_layout, encode_text(train_layout, "color2 shape0 at 0 1")) \
        == "color2 shape0 at 0 1"
    assert encode_text(toy_layout, "a") == [0]
    with pytest.raises(ValueError):
        encode_text(toy_layout, "z")  # beyond the 21 symbols a 32-id text range leaves


def test_caption_example():
    scene = Scene(2, (SceneObject(0, 2, 0, 1),))
    assert caption(scene) == "color2 shape0 at 0 1"


def test_caption_is_row_major():
    scene = Scene(3, (SceneObject(1, 1, 2, 0), SceneObject(0, 2, 0, 1)))
    assert caption(scene) == "color2 shape0 at 0 1, color1 shape1 at 2 0"


def test_caption_injective_on_small_scenes():
    objects = [SceneObject(s, c, r, k) for s in range(3) for c in range(5)
               for r in range(3) for k in range(3)]
    seen = {}
    scenes = [Scene(3, ())] + [Scene(3, (o,)) for o in objects]
    for a, b in itertools.combinations(objects, 2):
        if (a.row, a.col) != (b.row, b.col):
            scenes.append(Scene(3, (a, b)))
    for sc in scenes:
        cap = caption(sc)
        assert seen.setdefault(cap, sc) == sc
    assert len(seen) == len(set(scenes))


def test_render_parse_round_trip(rng):
    cfg = SceneConfig(side=4, max_objects=5)
    for _ in range(200):
        sc = sample_scene(rng, cfg)
        assert parse_grid(render(sc)) == sc
        assert parse_attribute_prompt(attribute_prompt(sc)) == sorted(
            (o.color, o.shape) for o in sc.objects)


def test_animate():
    sc = Scene(3, (SceneObject(1, 2, 0, 2),))
    assert animate(sc, 1).frames == (render(sc),)
    clip = animate(sc, 3, "right")
    cols = [parse_grid(f).objects[0].col for f in clip.frames]
    assert cols == [2, 0, 1]
    rows = [parse_grid(f).objects[0].row for f in animate(sc, 3, "down").frames]
    assert rows == [0, 1, 2]


@pytest.mark.parametrize("op", ["recolor", "remove", "add"])
def test_edit_pair_changes_only_named_cells(rng, op):
    cfg = SceneConfig(side=3, min_objects=1, max_objects=3)
    for _ in range(100):
        sc = sample_scene(rng, cfg)
        if op == "add" and len(sc.objects) == 9:
            continue
        src, instr, tgt = make_edit_pair(rng, sc, op=op)
        assert instr.startswith(op)
        diff = [(r, c) for r in range(3) for c in range(3) if src.cells[r][c] != tgt.cells[r][c]]
        assert len(diff) == 1
        r, c = diff[0]
        if op == "add":
            assert instr.endswith(f"at {r} {c}")
        else:
            assert instr.split()[1:3] == [str(r), str(c)]
        if op == "recolor":
            assert parse_grid(tgt).objects != parse_grid(src).objects
            assert src.cells[r][c] != 0 and tgt.cells[r][c] != 0


def test_scene_config_rejects_overfull():
    with pytest.raises(ValueError):
        SceneConfig(side=2, max_objects=5)


def test_chat_verifier():
    assert chat_answer_ok("sum 7", "3+4")
    assert chat_answer_ok("sum 7", "7+0")
    assert not chat_answer_ok("sum 7", "3+5")
    assert not chat_answer_ok("sum 7", "34")
    assert chat_answer_ok("rev abc", "cba")
    assert chat_answer_ok("sum 7", "3+4=7", think=True)
    assert not chat_answer_ok("sum 7", "3+4", think=True)


def test_records_are_deterministic():
    cfg = DataConfig()
    for fam in ["chat", "think", "i2t", "t2i", "i2i", "v2t", "asr", "tts"]:
        a = sample_record(np.random.default_rng(5), fam, cfg)
        b = sample_record(np.random.default_rng(5), fam, cfg)
        assert a == b and a["family"] == fam


def test_tokenizer_outputs_stay_in_range(train_layout):
    rng = np.random.default_rng(7)
    cfg = SceneConfig(side=3)
    for _ in range(10_000 // 4):
        sc = sample_scene(rng, cfg)
        assert all(modality_of(train_layout, t) is Modality.VISION
                   for t in tokenize_image(train_layout, render(sc)))
        s = speech_string(rng, 0, 8)
        assert all(modality_of(train_layout, t) is Modality.SPEECH
                   for t in tokenize_speech(train_layout, s))
