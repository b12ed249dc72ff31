"""Training objectives: KL-based targets, self-alignment terms, phase schedule.

All KL terms read KL(target || prediction). Probabilities are clamped at
1e-12 before the log so hard labels like (1, 0) stay finite. Batched inputs
reduce by mean over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ScoreDistribution

PROB_FLOOR = 1e-12


def _as_prob_tensor(p, name: str) -> Tensor:
    if isinstance(p, ScoreDistribution):
        p = p.probs
    if not isinstance(p, Tensor):
        p = Tensor(np.asarray(p, dtype=np.float64))
    data = p.data
    if data.shape[-1] != 2:
        raise ValueError(f"{name} must have a trailing (yes, no) pair, got {data.shape}")
    if np.any(data < -1e-9) or np.any(data > 1.0 + 1e-9):
        raise ValueError(f"{name} components must lie in [0, 1]")
    if not np.allclose(data.sum(axis=-1), 1.0, atol=1e-6):
        raise ValueError(f"{name} rows must sum to 1")
    return p


def kl(p, q) -> Tensor:
    """KL(p || q) = sum p_i ln(p_i / q_i), 0 ln 0 = 0; mean over leading dims.

    Differentiable in both arguments when they are live tensors.
    """
    p = _as_prob_tensor(p, "p")
    q = _as_prob_tensor(q, "q")
    terms = p * (p.clamp_min(PROB_FLOOR).log() - q.clamp_min(PROB_FLOOR).log())
    return terms.sum(axis=-1).mean() if terms.ndim > 1 else terms.sum()


@dataclass
class Targets:
    """Per-example supervision: ground truth p*, frozen teacher p-hat.

    The self full-text pair (p-bar) is recomputed live from the ranker each
    step, so it travels separately as a tensor.
    """

    p_star: np.ndarray
    p_hat: np.ndarray | None = None


@dataclass
class AlignmentState:
    """Last hidden states of the mixed-input and full-text forwards."""

    h_last: Tensor
    h_bar_last: Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5
    lambda_distill: float = 1.0
    lambda_align: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda_distill", "lambda_align"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta,
                "lambda_distill": self.lambda_distill, "lambda_align": self.lambda_align}


@dataclass(frozen=True)
class CurriculumSchedule:
    """Piecewise-constant loss weights over training steps."""

    phases: tuple[tuple[int, LossWeights], ...]

    def __post_init__(self):
        if not self.phases:
            raise ValueError("schedule needs at least one phase")
        for steps, _ in self.phases:
            if steps <= 0:
                raise ValueError("phase step counts must be positive")

    @property
    def total_steps(self) -> int:
        return sum(steps for steps, _ in self.phases)


def weights_at(schedule: CurriculumSchedule, step: int) -> LossWeights:
    if step < 0 or step >= schedule.total_steps:
        raise ValueError(f"step {step} outside schedule of {schedule.total_steps}")
    upto = 0
    for steps, weights in schedule.phases:
        upto += steps
        if step < upto:
            return weights
    raise AssertionError("unreachable")


def two_phase_schedule(total_steps: int, phase1_frac: float = 0.3,
                       alpha: float = 0.5, beta: float = 0.5) -> CurriculumSchedule:
    """Default curriculum: an alignment-heavy phase, then a task-heavy phase."""
    p1 = max(1, int(total_steps * phase1_frac))
    p2 = max(1, total_steps - p1)
    return CurriculumSchedule(phases=(
        (p1, LossWeights(alpha=alpha, beta=beta, lambda_distill=0.1, lambda_align=1.0)),
        (p2, LossWeights(alpha=alpha, beta=beta, lambda_distill=1.0, lambda_align=0.1)),
    ))


def flat_schedule(total_steps: int, weights: LossWeights) -> CurriculumSchedule:
    return CurriculumSchedule(phases=((total_steps, weights),))


# -- loss terms ----------------------------------------------------------------


def loss_sft(pred, targets: Targets) -> Tensor:
    return kl(targets.p_star, pred)


def loss_distill(pred, targets: Targets) -> Tensor:
    if targets.p_hat is None:
        raise ValueError("distillation loss needs teacher targets")
    return kl(targets.p_hat, pred)


def loss_hidden_align(state: AlignmentState) -> Tensor:
    sim = ad.cosine_similarity(state.h_last, state.h_bar_last)
    return (1.0 - sim).mean()


def loss_pred_align(p_bar, pred) -> Tensor:
    return kl(p_bar, pred)


def loss_align(state: AlignmentState, p_bar, pred, weights: LossWeights) -> Tensor:
    return weights.alpha * loss_pred_align(p_bar, pred) \
        + weights.beta * loss_hidden_align(state)


def loss_total(sft: Tensor, distill: Tensor, align: Tensor,
               weights: LossWeights) -> Tensor:
    return sft + weights.lambda_distill * distill + weights.lambda_align * align
