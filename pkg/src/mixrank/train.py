"""Two training stages and ranking evaluation.

Stage II fits a full-text teacher against the graded labels. Stage III
co-trains the encoder and ranker on mixed prompts with four loss terms:
ground-truth KL, distillation KL against the frozen teacher, and the two
self-alignment terms tying mixed-input behavior to the same ranker's
full-text behavior. Loss weights follow a phase schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Example, EvalQuery, as_batches, gen_eval_queries
from .errors import TrainingError
from .losses import (
    AlignmentState,
    CurriculumSchedule,
    LossWeights,
    flat_schedule,
    kl,
    loss_hidden_align,
    weights_at,
)
from .mix import fulltext_outputs_batch, mixed_outputs_batch
from .model import ModelConfig, Params, init_params
from .optim import AdamW, OptimizerHyper, lr_at


# -- metric ----------------------------------------------------------------------


def ndcg_at_10(ranked_grades, ideal_grades) -> float:
    """NDCG truncated at rank 10 with linear gains.

    `ranked_grades` are the grades in predicted order; `ideal_grades` must be
    the same multiset. All-zero lists score 1.0 by convention.
    """
    ranked = list(ranked_grades)
    ideal = sorted(ideal_grades, reverse=True)
    if len(ranked) < 1:
        raise ValueError("ndcg needs at least one item")
    if sorted(ranked) != sorted(ideal):
        raise ValueError("ranked and ideal grades are different multisets")

    def dcg(grades):
        return sum(g / math.log2(i + 2) for i, g in enumerate(grades[:10]))

    denom = dcg(ideal)
    if denom == 0.0:
        return 1.0
    return dcg(ranked) / denom


# -- evaluation helpers --------------------------------------------------------------


def eval_ndcg_fulltext(ranker: Params, queries: list[EvalQuery]) -> float:
    scores = []
    for query in queries:
        items = np.array([tokens for tokens, _ in query.items], dtype=np.int64)
        q = np.tile(np.asarray(query.q_tokens, dtype=np.int64), (len(query.items), 1))
        probs, _ = fulltext_outputs_batch(ranker, q, items)
        scores.append(_rank_and_score(probs.data[:, 0], [g for _, g in query.items]))
    return float(np.mean(scores))


def eval_ndcg_mixed(ranker: Params, encoder: Params, t_s: int,
                    queries: list[EvalQuery]) -> float:
    scores = []
    for query in queries:
        items = np.array([tokens for tokens, _ in query.items], dtype=np.int64)
        q = np.tile(np.asarray(query.q_tokens, dtype=np.int64), (len(query.items), 1))
        probs, _ = mixed_outputs_batch(ranker, encoder, q, items, t_s)
        scores.append(_rank_and_score(probs.data[:, 0], [g for _, g in query.items]))
    return float(np.mean(scores))


def _rank_and_score(p_yes: np.ndarray, grades: list[int]) -> float:
    order = np.argsort(-p_yes, kind="stable")
    ranked = [grades[i] for i in order]
    return ndcg_at_10(ranked, grades)


def permutation_null_ndcg(queries: list[EvalQuery], n_perms: int, seed: int) -> np.ndarray:
    """NDCG@10 of random orderings; the null distribution a model must beat."""
    rng = np.random.default_rng(seed)
    out = np.zeros(n_perms)
    for k in range(n_perms):
        vals = []
        for query in queries:
            grades = [g for _, g in query.items]
            perm = rng.permutation(len(grades))
            vals.append(ndcg_at_10([grades[i] for i in perm], grades))
        out[k] = np.mean(vals)
    return out


# -- configs and results ---------------------------------------------------------------


@dataclass(frozen=True)
class StageConfig:
    """Shared knobs for one training run."""

    model: ModelConfig = ModelConfig()
    hyper: OptimizerHyper = OptimizerHyper()
    batch_size: int = 32
    seed: int = 0
    eval_seed: int = 9999
    eval_queries: int = 100
    t_s: int = 1
    encoder_seed_offset: int = 1000


@dataclass
class TrainResult:
    params: Params
    history: list[dict] = field(default_factory=list)
    ndcg: float = float("nan")
    encoder: Params | None = None


def _check_loss(value: float) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"loss diverged to {value}")


def _batch_stream(dataset: list[Example], batch_size: int, total_steps: int,
                  rng: np.random.Generator):
    step = 0
    while step < total_steps:
        for batch in as_batches(dataset, batch_size, rng):
            yield step, batch
            step += 1
            if step >= total_steps:
                return


# -- stage II: full-text teacher ------------------------------------------------------


def train_stage2_teacher(config: StageConfig, dataset: list[Example],
                         log: list[dict] | None = None) -> TrainResult:
    """SFT on full-text prompts against the graded ground truth."""
    if not dataset:
        raise ValueError("empty dataset")
    params = init_params(config.model, seed=config.seed)
    opt = AdamW(params.parameters(), config.hyper)
    rng = np.random.default_rng(config.seed)
    history: list[dict] = log if log is not None else []

    for step, (_, q, items, p_star) in _batch_stream(
            dataset, min(config.batch_size, len(dataset)), config.hyper.total_steps, rng):
        probs, _ = fulltext_outputs_batch(params, q, items)
        loss = kl(p_star, probs)
        _check_loss(loss.item())
        params.zero_grads()
        loss.backward()
        lr = lr_at(config.hyper, step + 1)
        opt.step(lr)
        history.append({"step": step, "loss_sft": loss.item(), "lr": lr})

    queries = gen_eval_queries(config.eval_seed, config.eval_queries)
    ndcg = eval_ndcg_fulltext(params, queries)
    return TrainResult(params=params, history=history, ndcg=ndcg)


# -- stage III: joint encoder + ranker --------------------------------------------------


def teacher_predictions(teacher: Params, dataset: list[Example],
                        batch_size: int = 256) -> np.ndarray:
    """Frozen teacher (p-hat) for every example; computed once, no gradients."""
    out = np.zeros((len(dataset), 2))
    for lo in range(0, len(dataset), batch_size):
        chunk = dataset[lo:lo + batch_size]
        q = np.array([e.q_tokens for e in chunk], dtype=np.int64)
        items = np.array([e.item_tokens for e in chunk], dtype=np.int64)
        probs, _ = fulltext_outputs_batch(teacher, q, items)
        out[lo:lo + len(chunk)] = probs.data
    return out


def train_stage3_joint(config: StageConfig, dataset: list[Example], teacher: Params | None,
                       schedule: CurriculumSchedule | None = None,
                       log: list[dict] | None = None) -> TrainResult:
    """Co-train encoder and ranker on mixed prompts under the loss schedule.

    The teacher is frozen; its predictions are precomputed. The full-text
    self branch (p-bar, h-bar) runs through the live ranker every step, so
    its gradient reaches ranker parameters only.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if schedule is None:
        schedule = flat_schedule(config.hyper.total_steps, LossWeights())
    if schedule.total_steps != config.hyper.total_steps:
        raise ValueError("schedule length must match optimizer total_steps")

    ranker = init_params(config.model, seed=config.seed)
    encoder_cfg = ModelConfig(**{**config.model.to_dict(), "head_mode": "none"})
    encoder = init_params(encoder_cfg, seed=config.seed + config.encoder_seed_offset)

    needs_teacher = any(w.lambda_distill > 0 for _, w in schedule.phases)
    if needs_teacher and teacher is None:
        raise ValueError("schedule uses distillation but no teacher was given")
    p_hat_all = teacher_predictions(teacher, dataset) if teacher is not None else None

    opt = AdamW(ranker.parameters() + encoder.parameters(), config.hyper)
    rng = np.random.default_rng(config.seed)
    history: list[dict] = log if log is not None else []

    for step, (idx, q, items, p_star) in _batch_stream(
            dataset, min(config.batch_size, len(dataset)), config.hyper.total_steps, rng):
        w = weights_at(schedule, step)
        probs, h_last = mixed_outputs_batch(ranker, encoder, q, items, config.t_s)
        sft = kl(p_star, probs)
        total = sft
        record = {"step": step, "loss_sft": sft.item()}

        if w.lambda_distill > 0 and p_hat_all is not None:
            distill = kl(p_hat_all[idx], probs)
            total = total + w.lambda_distill * distill
            record["loss_distill"] = distill.item()
        if w.lambda_align > 0:
            p_bar, h_bar = fulltext_outputs_batch(ranker, q, items)
            pred_align = kl(p_bar, probs)
            hidden_align = loss_hidden_align(AlignmentState(h_last=h_last, h_bar_last=h_bar))
            total = total + w.lambda_align * (w.alpha * pred_align + w.beta * hidden_align)
            record["loss_pred_align"] = pred_align.item()
            record["loss_hidden_align"] = hidden_align.item()

        _check_loss(total.item())
        ranker.zero_grads()
        encoder.zero_grads()
        total.backward()
        lr = lr_at(config.hyper, step + 1)
        opt.step(lr)
        record["loss_total"] = total.item()
        record["lr"] = lr
        history.append(record)

    queries = gen_eval_queries(config.eval_seed, config.eval_queries)
    ndcg = eval_ndcg_mixed(ranker, encoder, config.t_s, queries)
    return TrainResult(params=ranker, history=history, ndcg=ndcg, encoder=encoder)
