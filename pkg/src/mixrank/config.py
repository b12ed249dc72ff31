"""Run configuration: one JSON file drives training, encoding, and serving.

Every run persists its fully resolved configuration next to its outputs so
reruns are bitwise reproducible; nothing is left to hidden defaults in saved
artifacts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import CurriculumSchedule, LossWeights, flat_schedule, two_phase_schedule
from .model import ModelConfig
from .optim import OptimizerHyper


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    train_size: int = 20000
    eval_seed: int = 9999
    eval_queries: int = 100

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train_size": self.train_size,
                "eval_seed": self.eval_seed, "eval_queries": self.eval_queries}


def default_teacher_hyper() -> OptimizerHyper:
    return OptimizerHyper(peak_lr=3e-3, warmup_steps=30, total_steps=300,
                          weight_decay=0.01)


def default_joint_hyper() -> OptimizerHyper:
    return OptimizerHyper(peak_lr=1.5e-3, warmup_steps=40, total_steps=600,
                          weight_decay=0.01)


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=lambda: ModelConfig(max_seq=64))
    data: DataConfig = field(default_factory=DataConfig)
    batch_size: int = 32
    t_s: int = 1
    teacher: OptimizerHyper = field(default_factory=default_teacher_hyper)
    joint: OptimizerHyper = field(default_factory=default_joint_hyper)
    curriculum: dict = field(default_factory=lambda: {
        "kind": "two_phase", "phase1_frac": 0.3, "alpha": 0.5, "beta": 0.5})

    def schedule(self) -> CurriculumSchedule:
        kind = self.curriculum.get("kind", "two_phase")
        total = self.joint.total_steps
        if kind == "two_phase":
            return two_phase_schedule(total,
                                      phase1_frac=self.curriculum.get("phase1_frac", 0.3),
                                      alpha=self.curriculum.get("alpha", 0.5),
                                      beta=self.curriculum.get("beta", 0.5))
        if kind == "flat":
            return flat_schedule(total, LossWeights(**self.curriculum.get("weights", {})))
        if kind == "phases":
            phases = tuple((int(steps), LossWeights(**weights))
                           for steps, weights in self.curriculum["phases"])
            return CurriculumSchedule(phases=phases)
        raise ValueError(f"unknown curriculum kind {kind!r}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
            "batch_size": self.batch_size,
            "t_s": self.t_s,
            "teacher": self.teacher.to_dict(),
            "joint": self.joint.to_dict(),
            "curriculum": self.curriculum,
        }

    @staticmethod
    def from_dict(raw: dict) -> "RunConfig":
        cfg = RunConfig()
        merged = cfg.to_dict()
        for key, value in raw.items():
            if key not in merged:
                raise ValueError(f"unknown config key {key!r}")
            if isinstance(merged[key], dict) and isinstance(value, dict) \
                    and key not in ("curriculum",):
                merged[key] = {**merged[key], **value}
            else:
                merged[key] = value
        return RunConfig(
            seed=merged["seed"],
            model=ModelConfig(**merged["model"]),
            data=DataConfig(**merged["data"]),
            batch_size=merged["batch_size"],
            t_s=merged["t_s"],
            teacher=OptimizerHyper(**merged["teacher"]),
            joint=OptimizerHyper(**merged["joint"]),
            curriculum=merged["curriculum"],
        )

    @staticmethod
    def load(path: str | Path | None) -> "RunConfig":
        if path is None:
            return RunConfig()
        return RunConfig.from_dict(json.loads(Path(path).read_text()))

    def save_resolved(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        target = out / "config.json"
        target.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return target


def write_metrics(out_dir: str | Path, history: list[dict], name: str = "metrics.jsonl") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / name
    with open(target, "w") as fh:
        for record in history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return target
