"""Command-line entry point: ``omnimask <command> ...``.

Data goes to stdout, diagnostics to stderr. Every command that writes files
writes ``run_config.json`` with its resolved configuration next to them. The
default output root is ``$OMNIMASK_OUT`` (``./runs`` when unset).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .curriculum import Curriculum, CurriculumConfig, load_config, write_losses
from .merging import MergeConfig, Strategy, merge
from .pipeline import (
    StageConfig,
    check_decode_config,
    default_decode_config,
    evaluate,
    generate_records,
    init_checkpoint,
    record_sequence,
    run_stage,
    speech_units_of,
    vocab_extension_init,
)
from .sampler import DecodeConfig, DecodeTrace, generate
from .synth import DataConfig, GridImage, caption, decode_text, detokenize_speech, parse_grid
from .templates import Family, mask_target, truncate_at_eos

log = logging.getLogger("omnimask")

OUT_ENV = "OMNIMASK_OUT"
ALL_FAMILIES = [f.value for f in Family]


class UsageError(Exception):
    pass


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def resolve_out(args, command: str) -> Path:
    return Path(args.out) if args.out else out_root() / command


def prepare_out(path: Path, force: bool, products: list[str]) -> Path:
    existing = [p for p in products if (path / p).exists()]
    if existing and not force:
        raise UsageError(f"{path / existing[0]} exists; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run_config(out: Path, command: str, resolved: dict) -> None:
    doc = {"command": command, **resolved}
    (out / "run_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def parse_families(text: str) -> list[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    out = []
    for n in names:
        try:
            out.append(Family.parse(n).value)
        except ValueError:
            raise UsageError(f"unknown family {n!r}; valid: {', '.join(ALL_FAMILIES)}") from None
    if not out:
        raise UsageError("no families given")
    return out


def parse_family(name: str) -> Family:
    try:
        return Family.parse(name)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def parse_steps(text: str) -> list[int]:
    try:
        steps = sorted({int(t) for t in text.split(",") if t.strip()})
    except ValueError:
        raise UsageError(f"bad step list {text!r}") from None
    if not steps or steps[0] < 1:
        raise UsageError("steps must be positive integers")
    return steps


def parse_grid_arg(text: str) -> list[list[int]]:
    """``"0,1;2,3"`` -> ``[[0, 1], [2, 3]]``."""
    rows = [[int(c) for c in r.split(",")] for r in text.split(";")]
    if any(len(r) != len(rows) for r in rows):
        raise UsageError("grid must be square, rows separated by ';'")
    return rows


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")


def data_config(args, base: dict | None = None) -> DataConfig:
    d = dict(base or {})
    if getattr(args, "grid_side", None):
        d["scene"] = {**d.get("scene", {}), "side": args.grid_side}
    return DataConfig.from_dict(d)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    fams = parse_families(args.families) if args.families else ALL_FAMILIES
    data = data_config(args, load_config(args.data_config) if args.data_config else None)
    out = prepare_out(resolve_out(args, "data"), args.force, ["records.jsonl"])
    records = generate_records(args.seed, {f: args.count for f in fams}, data)
    write_jsonl(out / "records.jsonl", records)
    write_run_config(out, "gen-data", {"seed": args.seed, "families": fams, "count": args.count,
                                       "data": data.to_dict()})
    print(out / "records.jsonl")
    return 0


def cmd_train(args) -> int:
    cfg_dict = load_config(args.config or f"stage{args.stage}")
    if cfg_dict.get("stage", args.stage) != args.stage:
        raise UsageError(f"config is for stage {cfg_dict['stage']}, not {args.stage}")
    cfg_dict["stage"] = args.stage
    for key in ("steps", "seed", "batch_size"):
        if getattr(args, key) is not None:
            cfg_dict[key] = getattr(args, key)
    if args.peak_lr is not None:
        cfg_dict["peak_lr"] = args.peak_lr
    stage_cfg = StageConfig.from_dict(cfg_dict)
    out = prepare_out(resolve_out(args, f"stage{args.stage}"), args.force,
                      ["checkpoint.omdf"])

    if args.init:
        init = load_checkpoint(args.init)
    elif args.stage == 0:
        cur = CurriculumConfig.shipped()
        if args.model:
            cur.model = load_config(args.model)
        init = init_checkpoint(cur.model_config(with_speech=False))
    else:
        raise UsageError(f"stage {args.stage} needs --init")
    if args.stage == 1 and init.layout.speech_size == 0:
        # Stage 1 starts from the backbone with the speech vocabulary appended.
        init = vocab_extension_init(init, args.speech_size, args.extension_seed)
        log.info("extended vocabulary to %d tokens", init.layout.total_size)

    data = None
    if args.data:
        data = {}
        for rec in read_jsonl(args.data):
            data.setdefault(Family.parse(rec["family"]).value, []).append(rec)

    def progress(step, loss):
        if step % args.log_every == 0:
            log.info("step %d loss %.4f", step, loss)

    res = run_stage(stage_cfg, init, data=data, progress=progress)
    save_checkpoint(res.checkpoint, out / "checkpoint.omdf")
    write_losses(out / "loss.csv", res.losses)
    write_run_config(out, "train", {"stage_config": stage_cfg.to_dict(), "init": args.init,
                                    "data": args.data, "model": res.checkpoint.config.to_dict(),
                                    "vocab": res.checkpoint.layout.to_dict()})
    print(out / "checkpoint.omdf")
    return 0


def cmd_merge(args) -> int:
    if not 0.0 <= args.alpha <= 1.0:
        raise UsageError(f"--alpha {args.alpha} outside [0, 1]")
    theta0 = load_checkpoint(args.backbone)
    theta1 = load_checkpoint(args.stage1)
    cfg = MergeConfig(args.alpha, Strategy(args.strategy))
    out = prepare_out(resolve_out(args, "merge"), args.force, ["checkpoint.omdf"])
    params = merge(theta0.params, theta1.params, cfg)
    meta = {"merged": {"alpha": cfg.alpha, "strategy": cfg.strategy.value}}
    save_checkpoint(Checkpoint(params, meta), out / "checkpoint.omdf")
    write_run_config(out, "merge", {"backbone": args.backbone, "stage1": args.stage1,
                                    "alpha": cfg.alpha, "strategy": cfg.strategy.value})
    print(out / "checkpoint.omdf")
    return 0


def _suite(args, eval_cfg: dict, families: list[str] | None) -> list[dict]:
    if args.suite:
        recs = read_jsonl(args.suite)
    else:
        fams = families or eval_cfg["families"]
        data = DataConfig.from_dict(eval_cfg.get("data", {}))
        recs = generate_records(eval_cfg["seed"], {f: args.count or eval_cfg["count"]
                                                   for f in fams}, data)
    if families:
        keep = set(families)
        recs = [r for r in recs if Family.parse(r["family"]).value in keep]
    if not recs:
        raise UsageError("evaluation suite is empty")
    return recs


def _decode_overrides(args, families: set[str]) -> dict[str, DecodeConfig]:
    if args.cfg_scale is not None and args.cfg_scale != 1:
        bad = sorted(f for f in families if not Family.parse(f).generates_image)
        if bad:
            raise UsageError(f"--cfg-scale only applies to image tasks (t2i, i2i), not {bad}")
    if args.steps is None and args.block is None and args.cfg_scale is None:
        return {}
    out = {}
    for f in families:
        out[f] = {"steps": args.steps, "block_length": args.block,
                  "cfg_scale": args.cfg_scale if args.cfg_scale is not None else 1.0}
    return out


def _resolve_decode(fam: Family, target_len: int, override: dict | None,
                    seed: int) -> DecodeConfig:
    base = default_decode_config(fam, target_len)
    kw = {"steps": base.steps, "block_length": base.block_length, "schedule": base.schedule,
          "cfg_scale": base.cfg_scale, "seed": seed}
    for k, v in (override or {}).items():
        if v is not None:
            kw[k] = v
    cfg = DecodeConfig(**kw)
    check_decode_config(fam, cfg, target_len)
    return cfg


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    eval_cfg = load_config(args.eval_config or "eval")
    fams = parse_families(args.tasks) if args.tasks else None
    suite = _suite(args, eval_cfg, fams)
    present = {Family.parse(r["family"]).value for r in suite}
    overrides = _decode_overrides(args, present)
    capacities = eval_cfg.get("capacities", {})
    decode = {}
    for f in present:
        fam = Family.parse(f)
        rec = next(r for r in suite if Family.parse(r["family"]) is fam)
        seq = record_sequence(ckpt.layout, rec, 3 if fam is Family.ThinkingMode else 2, capacities)
        a, e = seq.target_span
        decode[f] = _resolve_decode(fam, e - a, {**eval_cfg.get("decode", {}).get(f, {}),
                                                 **overrides.get(f, {})}, args.seed)
    out = prepare_out(resolve_out(args, "eval"), args.force, ["report.jsonl"])
    report = evaluate(ckpt.params, suite, capacities=capacities, decode=decode,
                      n_colors=DataConfig.from_dict(eval_cfg.get("data", {})).scene.n_colors)
    (out / "report.jsonl").write_text(report.to_jsonl())
    write_run_config(out, "eval", {
        "ckpt": args.ckpt, "suite": args.suite, "eval_config": eval_cfg,
        "decode": {f: _decode_dict(c) for f, c in decode.items()}})
    sys.stdout.write(report.to_jsonl())
    return 0


def _decode_dict(c: DecodeConfig) -> dict:
    return {"steps": c.steps, "block_length": c.block_length,
            "schedule": c.schedule.value if c.schedule else None, "temperature": c.temperature,
            "cfg_scale": c.cfg_scale, "remask": c.remask.value, "seed": c.seed}


SWEEP_METRIC = {"t2i": "scene_match", "i2i": "exact_match", "tts": "cer"}


def monotone_summary(rows: list[tuple[int, float]], band: float, higher_is_better: bool = True
                     ) -> str:
    """Describe whether a sweep is non-decreasing up to its plateau within ``band``."""
    vals = [v if higher_is_better else -v for _, v in rows]
    best = max(vals)
    drops = [(rows[i][0], vals[i - 1] - vals[i]) for i in range(1, len(vals))
             if vals[i - 1] - vals[i] > band]
    plateau = next(s for (s, _), v in zip(rows, vals) if v >= best - band)
    gain = vals[-1] - vals[0]
    trend = "monotone" if not drops else "non-monotone"
    return (f"{trend} within {band:.3f}; plateau reached at steps={plateau}; "
            f"first-to-last change {gain:+.3f}"
            + ("" if not drops else f"; drops at steps {[s for s, _ in drops]}"))


def cmd_sweep(args) -> int:
    steps = parse_steps(args.steps)
    fam = parse_family(args.task)
    ckpt = load_checkpoint(args.ckpt)
    eval_cfg = load_config(args.eval_config or "eval")
    suite = _suite(args, eval_cfg, [fam.value])
    metric = args.metric or SWEEP_METRIC.get(fam.value, "exact_match")
    out = prepare_out(resolve_out(args, f"sweep-{fam.value}"), args.force, ["sweep.csv"])
    capacities = eval_cfg.get("capacities", {})
    seq = record_sequence(ckpt.layout, suite[0], 3, capacities)
    target_len = seq.target_span[1] - seq.target_span[0]
    rows = []
    for s in steps:
        override = {"steps": s, "block_length": args.block,
                    "cfg_scale": args.cfg_scale if args.cfg_scale is not None else None}
        cfg = _resolve_decode(fam, target_len, override, args.seed)
        rep = evaluate(ckpt.params, suite, capacities=capacities, decode={fam.value: cfg})
        rows.append((s, rep.get(fam.value, metric)))
        log.info("steps %d %s %.4f", s, metric, rows[-1][1])
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["steps", metric])
        w.writerows(rows)
    summary = monotone_summary(rows, args.band, higher_is_better=metric != "cer")
    write_run_config(out, "sweep", {"ckpt": args.ckpt, "task": fam.value, "steps": steps,
                                    "metric": metric, "eval_config": eval_cfg})
    for s, v in rows:
        print(f"{s},{v}")
    print(summary, file=sys.stderr)
    return 0


def _generation_record(fam: Family, args) -> dict:
    side = args.grid_side or 3
    blank = [[0] * side for _ in range(side)]
    if fam is Family.TextChat:
        return {"family": fam.value, "prompt": args.prompt, "response": ""}
    if fam is Family.ThinkingMode:
        return {"family": fam.value, "prompt": args.prompt, "think": args.think, "response": ""}
    if fam is Family.TextToImage:
        return {"family": fam.value, "instruction": args.prompt, "image": blank}
    if fam is Family.ImageToText:
        return {"family": fam.value, "image": parse_grid_arg(args.image),
                "prompt": args.prompt or "describe", "response": ""}
    if fam is Family.ImageToImage:
        src = parse_grid_arg(args.image)
        return {"family": fam.value, "source": src, "instruction": args.prompt,
                "target": [[0] * len(src) for _ in src]}
    if fam is Family.VideoToText:
        frames = [parse_grid_arg(f) for f in args.image.split("|")]
        return {"family": fam.value, "frames": frames, "prompt": args.prompt or "what moves",
                "response": ""}
    from .synth import SPEECH_ALPHABET

    if fam is Family.SpeechToText:
        units = [SPEECH_ALPHABET.index(c) for c in args.prompt for _ in range(2)]
        return {"family": fam.value, "text": "", "units": units}
    return {"family": fam.value, "text": args.prompt, "units": []}


def render_output(layout, fam: Family, target: np.ndarray, n_colors: int = 5) -> str:
    if fam.generates_image:
        side = math.isqrt(len(target))
        cells = (np.asarray(target) - layout.vision_offset).reshape(side, side)
        grid = "\n".join(" ".join(f"{c:2d}" for c in row) for row in cells)
        scene = parse_grid(GridImage.from_array(cells), n_colors)
        return f"{grid}\nscene: {caption(scene) or '(empty)'}"
    if fam.generates_speech:
        units = speech_units_of(layout, target)
        text = detokenize_speech(layout, units)
        rel = [u - layout.speech_offset for u in units]
        return f"units: {' '.join(map(str, rel))}\ntext: {text}"
    try:
        return decode_text(layout, truncate_at_eos(layout, target))
    except ValueError:
        return "<undecodable>"


def cmd_generate(args) -> int:
    fam = parse_family(args.family)
    if args.prompt is None:
        raise UsageError("--prompt is required")
    if fam in (Family.ImageToText, Family.ImageToImage, Family.VideoToText) and not args.image:
        raise UsageError(f"{fam.value} needs --image")
    ckpt = load_checkpoint(args.ckpt)
    eval_cfg = load_config("eval")
    rec = _generation_record(fam, args)
    seq = record_sequence(ckpt.layout, rec, 3, eval_cfg.get("capacities", {}))
    a, e = seq.target_span
    override = {"steps": args.steps, "block_length": args.block, "cfg_scale": args.cfg_scale,
                "temperature": args.temperature}
    cfg = _resolve_decode(fam, e - a, override, args.seed)
    trace = DecodeTrace()
    out = generate(ckpt.params, mask_target(ckpt.layout, seq), cfg, trace)
    print(render_output(ckpt.layout, fam, out[a:e]))
    log.info("forward calls: %d", trace.forward_calls)
    return 0


def cmd_curriculum(args) -> int:
    cfg = CurriculumConfig.from_dict(json.loads(Path(args.config).read_text())) \
        if args.config else CurriculumConfig.shipped()
    out = resolve_out(args, "curriculum")

    def progress(name, step, loss):
        if step % args.log_every == 0:
            log.info("%s step %d loss %.4f", name, step, loss)

    paths = Curriculum(cfg, out, progress).run_all()
    write_run_config(out, "curriculum", cfg.to_dict())
    for name, p in paths.items():
        print(f"{name}\t{p}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omnimask", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common_out(sp):
        sp.add_argument("--out", help=f"output directory (default under ${OUT_ENV})")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    g = sub.add_parser("gen-data", help="write a synthetic dataset as JSON lines")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--families", help="comma-separated, e.g. t2i,asr (default: all)")
    g.add_argument("--count", type=int, default=100, help="records per family")
    g.add_argument("--grid-side", type=int)
    g.add_argument("--data-config", help="DataConfig JSON overriding the defaults")
    common_out(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one curriculum stage")
    t.add_argument("--stage", type=int, required=True, choices=[0, 1, 2, 3])
    t.add_argument("--init", help="initial checkpoint (stage 0 may start from scratch)")
    t.add_argument("--config", help="stage config name or JSON path (default: stageN)")
    t.add_argument("--model", help="model config for a fresh stage-0 run")
    t.add_argument("--data", help="records.jsonl pool instead of on-the-fly sampling")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--peak-lr", type=float)
    t.add_argument("--speech-size", type=int, default=8)
    t.add_argument("--extension-seed", type=int, default=1)
    t.add_argument("--log-every", type=int, default=100)
    common_out(t)
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("merge", help="merge a backbone with a stage-1 checkpoint")
    m.add_argument("--backbone", required=True)
    m.add_argument("--stage1", required=True)
    m.add_argument("--alpha", type=float, default=0.6, help="weight on the backbone")
    m.add_argument("--strategy", default=Strategy.MODALITY_DISENTANGLED.value,
                   choices=[s.value for s in Strategy])
    common_out(m)
    m.set_defaults(func=cmd_merge)

    def decode_flags(sp):
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--suite", help="records.jsonl (default: generated from the eval config)")
        sp.add_argument("--eval-config", help="eval config name or JSON path")
        sp.add_argument("--count", type=int, help="records per family when generating")
        sp.add_argument("--block", type=int)
        sp.add_argument("--cfg-scale", type=float)
        sp.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="decode a suite and write a JSON-lines report")
    decode_flags(e)
    e.add_argument("--tasks", help="comma-separated family filter")
    e.add_argument("--steps", type=int)
    common_out(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="metric as a function of decoding steps")
    decode_flags(s)
    s.add_argument("--task", required=True)
    s.add_argument("--steps", required=True, help="comma-separated, e.g. 1,2,4,8")
    s.add_argument("--metric")
    s.add_argument("--band", type=float, default=0.02, help="noise band for the trend summary")
    common_out(s)
    s.set_defaults(func=cmd_sweep)

    gen = sub.add_parser("generate", help="decode one prompt and print the result")
    gen.add_argument("--ckpt", required=True)
    gen.add_argument("--family", required=True)
    gen.add_argument("--prompt")
    gen.add_argument("--image", help="grid like '0,1,0;0,0,0;2,0,0'; video frames joined by '|'")
    gen.add_argument("--think", action="store_true")
    gen.add_argument("--grid-side", type=int)
    gen.add_argument("--steps", type=int)
    gen.add_argument("--block", type=int)
    gen.add_argument("--cfg-scale", type=float)
    gen.add_argument("--temperature", type=float)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=cmd_generate)

    c = sub.add_parser("curriculum", help="run every stage, merge and ablation")
    c.add_argument("--config", help="curriculum JSON (default: shipped configs)")
    c.add_argument("--out")
    c.add_argument("--log-every", type=int, default=500)
    c.set_defaults(func=cmd_curriculum)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    torch.set_num_threads(int(os.environ.get("OMNIMASK_THREADS", torch.get_num_threads())))
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 1
    except (CheckpointError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
