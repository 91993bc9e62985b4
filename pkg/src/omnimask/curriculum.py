"""The toy curriculum end to end, with cached artifacts.

backbone (stage 0, V0) -> extend vocabulary -> stage 1 -> merge -> stage 2 -> stage 3

Alongside the main line it produces the three merge strategies at the
configured alpha and a stage-2 run without termination supervision, which the
merging and EOS analyses compare against. Every artifact records a fingerprint
of the configs that produced it, so a rerun reuses whatever is still valid.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping

from .backbone import ModelConfig
from .checkpoint import Checkpoint, CheckpointError, canonical_json, load_checkpoint, save_checkpoint
from .merging import MergeConfig, Strategy, merge
from .pipeline import StageConfig, StageResult, init_checkpoint, run_stage, vocab_extension_init
from .vocab import build_layout

log = logging.getLogger(__name__)

CONFIG_PACKAGE = "omnimask.configs"


def load_config(name_or_path: str | Path) -> dict:
    """A shipped config by bare name (``"stage2"``) or any JSON file path."""
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        return json.loads(path.read_text())
    res = resources.files(CONFIG_PACKAGE) / f"{name_or_path}.json"
    if not res.is_file():
        raise FileNotFoundError(f"no such config: {name_or_path}")
    return json.loads(res.read_text())


def fingerprint(*parts) -> str:
    return hashlib.sha256(canonical_json(list(parts)).encode()).hexdigest()[:16]


@dataclass
class CurriculumConfig:
    model: dict
    stages: dict[int, dict]
    alpha: float = 0.6
    extension_seed: int = 1
    ablation_stage: int = 2
    eval: dict = field(default_factory=dict)

    @classmethod
    def shipped(cls) -> "CurriculumConfig":
        cur = load_config("curriculum")
        stages = {int(s): load_config(name) for s, name in cur["stages"].items()}
        return cls(load_config(cur["model"]), stages, cur["alpha"], cur["extension_seed"],
                   cur["ablation_stage"], load_config(cur["eval"]))

    @classmethod
    def from_dict(cls, d: Mapping) -> "CurriculumConfig":
        return cls(dict(d["model"]), {int(k): dict(v) for k, v in d["stages"].items()},
                   d.get("alpha", 0.6), d.get("extension_seed", 1), d.get("ablation_stage", 2),
                   dict(d.get("eval", {})))

    def to_dict(self) -> dict:
        return {"model": self.model, "stages": {str(k): v for k, v in self.stages.items()},
                "alpha": self.alpha, "extension_seed": self.extension_seed,
                "ablation_stage": self.ablation_stage, "eval": self.eval}

    def model_config(self, with_speech: bool) -> ModelConfig:
        m = dict(self.model)
        v = m.pop("vocab")
        layout = build_layout(v["text_size"], v["vision_size"],
                              v["speech_size"] if with_speech else 0)
        return ModelConfig.from_dict(m, layout)

    @property
    def speech_size(self) -> int:
        return int(self.model["vocab"]["speech_size"])

    def stage_config(self, stage: int, **overrides) -> StageConfig:
        return StageConfig.from_dict({**self.stages[stage], **overrides})


def write_losses(path: Path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in losses:
            w.writerow([step, repr(loss), repr(lr)])


class Curriculum:
    """Produces (or reuses) every checkpoint of the curriculum under ``out``."""

    def __init__(self, config: CurriculumConfig, out: str | Path,
                 progress: Callable[[str, int, float], None] | None = None):
        self.config = config
        self.out = Path(out)
        self.progress = progress
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "curriculum.json").write_text(
            json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")

    def path(self, name: str) -> Path:
        return self.out / f"{name}.omdf"

    def _cached(self, name: str, fp: str) -> Checkpoint | None:
        p = self.path(name)
        if not p.exists():
            return None
        try:
            ck = load_checkpoint(p)
        except CheckpointError:
            return None
        return ck if ck.meta.get("fingerprint") == fp else None

    def _store(self, name: str, ck: Checkpoint, fp: str) -> Checkpoint:
        ck.meta["fingerprint"] = fp
        save_checkpoint(ck, self.path(name))
        return ck

    def _train(self, name: str, stage_cfg: StageConfig, init: Checkpoint) -> Checkpoint:
        fp = fingerprint(name, stage_cfg.to_dict(), init.meta.get("fingerprint"))
        ck = self._cached(name, fp)
        if ck is not None:
            log.info("reusing %s", name)
            return ck
        log.info("training %s: stage %d, %d steps", name, stage_cfg.stage, stage_cfg.steps)
        cb = None
        if self.progress is not None:
            cb = lambda step, loss: self.progress(name, step, loss)  # noqa: E731
        res: StageResult = run_stage(stage_cfg, init, progress=cb)
        write_losses(self.out / f"{name}_loss.csv", res.losses)
        return self._store(name, res.checkpoint, fp)

    def backbone(self) -> Checkpoint:
        mc = self.config.model_config(with_speech=False)
        fp = fingerprint("init", mc.to_dict(), mc.vocab.to_dict())
        init = init_checkpoint(mc)
        init.meta["fingerprint"] = fp
        return self._train("backbone", self.config.stage_config(0), init)

    def extended(self) -> Checkpoint:
        base = self.backbone()
        ck = vocab_extension_init(base, self.config.speech_size, self.config.extension_seed)
        ck.meta["fingerprint"] = fingerprint("extend", base.meta["fingerprint"],
                                             self.config.speech_size, self.config.extension_seed)
        return ck

    def stage1(self) -> Checkpoint:
        return self._train("stage1", self.config.stage_config(1), self.extended())

    def merged(self, strategy: Strategy | str = Strategy.MODALITY_DISENTANGLED) -> Checkpoint:
        strategy = Strategy(strategy)
        name = f"merged_{strategy.value}"
        theta0, theta1 = self.backbone(), self.stage1()
        fp = fingerprint(name, self.config.alpha, theta0.meta["fingerprint"],
                         theta1.meta["fingerprint"])
        ck = self._cached(name, fp)
        if ck is None:
            params = merge(theta0.params, theta1.params, MergeConfig(self.config.alpha, strategy))
            meta = {"merged": {"alpha": self.config.alpha, "strategy": strategy.value}}
            ck = self._store(name, Checkpoint(params, meta), fp)
        return ck

    def stage2(self) -> Checkpoint:
        return self._train("stage2", self.config.stage_config(2), self.merged())

    def stage2_ablation(self) -> Checkpoint:
        """Stage 2 with termination tokens left unsupervised, as in stage 1."""
        cfg = self.config.stage_config(self.config.ablation_stage, eos_supervised=False,
                                       ablation=True)
        return self._train(f"stage{self.config.ablation_stage}_noeos", cfg, self.merged())

    def stage3(self) -> Checkpoint:
        return self._train("stage3", self.config.stage_config(3), self.stage2())

    def run_all(self) -> dict[str, Path]:
        self.stage3()
        for s in Strategy:
            self.merged(s)
        self.stage2_ablation()
        return {p.stem: p for p in sorted(self.out.glob("*.omdf"))}
