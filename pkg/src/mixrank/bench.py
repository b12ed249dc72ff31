"""Throughput benchmark and training ablation grids.

The bench compares three item representations at a fixed query shape:
full item text, a summarized text stand-in (items truncated to the summary
budget; the baseline's cost profile is what matters, not its quality), and
the mixed representation (one embedding row plus the end-of-item token).
Each is driven through every engine mode; wall-clock throughput is measured
after warmup and the exact compute counters ride along.

Absolute throughput is machine-bound; only orderings and conservative ratio
floors are asserted anywhere.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .costmodel import CostParams
from .data import gen_dataset
from .engine import MODES, EngineModel, ItemSpec, ScoringBatch
from .losses import CurriculumSchedule, LossWeights, flat_schedule, two_phase_schedule
from .mix import DEFAULT_TOKENIZER, Tokenizer
from .model import ModelConfig, init_params
from .optim import OptimizerHyper
from .train import StageConfig, train_stage2_teacher, train_stage3_joint

REPRESENTATIONS = {"fulltext": 766, "summarized": 145, "mixlm": 2}


@dataclass(frozen=True)
class BenchSpec:
    t_q: int = 60
    n_i: int = 50
    representations: dict = field(default_factory=lambda: dict(REPRESENTATIONS))
    repetitions: int = 3
    warmup: int = 1
    latency_budget_ms: float = 500.0
    seed: int = 0

    def __post_init__(self):
        if self.t_q < 2 or self.n_i < 1 or self.repetitions < 1:
            raise ValueError("bench spec counts must be positive (t_q >= 2)")
        if not self.representations:
            raise ValueError("bench needs at least one representation")


def bench_model(seed: int = 0) -> EngineModel:
    # max_seq must admit the multi-item concatenation of full-text items
    cfg = ModelConfig(vocab_size=DEFAULT_TOKENIZER.vocab_size, hidden=32, layers=2,
                      heads=2, ffn_mult=4.0, max_seq=1 << 17)
    return EngineModel(init_params(cfg, seed=seed))


def build_batch(spec: BenchSpec, representation: str, hidden: int,
                rng: np.random.Generator,
                tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> ScoringBatch:
    """One query batch; item footprints include the trailing end-of-item token."""
    footprint = spec.representations[representation]
    prefix = (tokenizer.bos,
              *(int(t) for t in rng.integers(0, 64, spec.t_q - 2)),
              tokenizer.sep)
    items = []
    for _ in range(spec.n_i):
        if representation == "mixlm":
            rows = rng.normal(size=(footprint - 1, hidden))
            items.append(ItemSpec.from_rows(rows, tokenizer))
        else:
            tokens = [int(t) for t in rng.integers(0, 64, footprint - 1)]
            items.append(ItemSpec.from_text(tokens, tokenizer))
    return ScoringBatch(shared_prefix=prefix, items=items)


def bench(model: EngineModel, spec: BenchSpec,
          modes: tuple[str, ...] = ("naive", "prefix_cached", "multi_item")) -> list[dict]:
    """Measured records, one per (representation, mode)."""
    rng = np.random.default_rng(spec.seed)
    batches = {rep: build_batch(spec, rep, model.config.hidden, rng)
               for rep in spec.representations}
    records = []
    for rep, batch in batches.items():
        for mode in modes:
            fn = MODES[mode]
            for _ in range(spec.warmup):
                fn(model, batch)
            latencies = []
            report = None
            for _ in range(spec.repetitions):
                t0 = time.perf_counter()
                _, report = fn(model, batch)
                latencies.append((time.perf_counter() - t0) * 1000.0)
            mean_ms = statistics.fmean(latencies)
            records.append({
                "representation": rep,
                "item_tokens": spec.representations[rep],
                "mode": mode,
                "items_per_sec": spec.n_i / (mean_ms / 1000.0),
                "mean_latency_ms": mean_ms,
                "p99_latency_ms": float(np.percentile(latencies, 99)),
                "within_budget": mean_ms <= spec.latency_budget_ms,
                "report": report.to_dict(),
            })
    return records


def bench_service(spec: BenchSpec, ranker_params, clients: int = 4,
                  workers: int = 2, mode: str = "prefix_cached") -> dict:
    """Drive a live service over sockets with concurrent clients.

    Each client scores its own query stream (distinct prefixes hash across
    workers); throughput is aggregate items/sec for the mixlm representation.
    """
    import threading

    from .cache import EmbeddingCache
    from .service import Client, InlineRows, ScoringService

    cfg = ranker_params.config
    cache = EmbeddingCache(hidden=cfg.hidden)
    service = ScoringService(ranker_params, cache, model_version="bench",
                             workers=workers, pool_pages=1024)
    host, port = service.start()
    rng = np.random.default_rng(spec.seed)
    per_client_requests = max(2, spec.repetitions * 4)
    results: list[int] = []
    errors: list[Exception] = []

    def drive(client_id: int) -> None:
        local = np.random.default_rng(spec.seed + client_id)
        try:
            with Client(host, port) as client:
                scored = 0
                for r in range(per_client_requests):
                    prefix = tuple(int(t) for t in local.integers(0, 64, spec.t_q))
                    items = [InlineRows(local.normal(size=(1, cfg.hidden)))
                             for _ in range(spec.n_i)]
                    response = client.score(prefix, items, mode=mode,
                                            request_id=f"bench-{client_id}-{r}")
                    scored += sum(p is not None for p in response.p_yes)
                results.append(scored)
        except Exception as exc:  # noqa: BLE001 - surfaced to the caller
            errors.append(exc)

    threads = [threading.Thread(target=drive, args=(i,)) for i in range(clients)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t0
    service.stop()
    if errors:
        raise errors[0]
    total_items = int(sum(results))
    return {
        "clients": clients,
        "workers": workers,
        "mode": mode,
        "total_items": total_items,
        "elapsed_s": elapsed,
        "items_per_sec": total_items / elapsed,
    }


def bench_cost_params(spec: BenchSpec, representation: str) -> CostParams:
    """Cost-model view of a bench shape (k folds the footprint)."""
    full = spec.representations["fulltext"]
    footprint = spec.representations[representation]
    # choose k so ceil(full / k) equals the footprint
    k = 1 if footprint == full else -(-full // footprint)
    while -(-full // k) > footprint:
        k += 1
    return CostParams(t_q=spec.t_q, t_i=full, n_i=spec.n_i, k=k)


# -- ablation grids ---------------------------------------------------------------------


LOSS_COMBOS = {
    "sft_only": {"lambda_distill": 0.0, "lambda_align": 0.0},
    "distill": {"lambda_distill": 1.0, "lambda_align": 0.0},
    "align": {"lambda_distill": 0.0, "lambda_align": 0.5},
    "distill_align": {"lambda_distill": 1.0, "lambda_align": 0.5},
}


@dataclass(frozen=True)
class AblationProfile:
    """Grid + training scale for `run_ablations`; the quick profile is sized
    for the acceptance suite, the full one for offline study."""

    seeds: tuple[int, ...] = (0, 1, 2)
    dataset_sizes: tuple[int, ...] = (2000, 20000)
    t_s_grid: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    loss_combos: tuple[str, ...] = ("sft_only", "distill", "align", "distill_align")
    curricula: tuple[str, ...] = ("none", "two_phase", "three_phase")
    base_train_size: int = 4000
    # the curriculum effect only has room to show below the task ceiling, so
    # its section runs data-limited
    curriculum_train_size: int = 1200
    teacher_steps: int = 300
    joint_steps: int = 400
    eval_queries: int = 100
    batch_size: int = 32

    @staticmethod
    def quick() -> "AblationProfile":
        return AblationProfile(dataset_sizes=(2000, 4000), t_s_grid=(1, 8),
                               loss_combos=("sft_only", "distill_align"),
                               curricula=("none", "two_phase"),
                               joint_steps=300)


def _model_config() -> ModelConfig:
    return ModelConfig(vocab_size=DEFAULT_TOKENIZER.vocab_size, hidden=32, layers=2,
                       heads=2, ffn_mult=4.0, max_seq=64)


def curriculum_schedule(kind: str, total_steps: int) -> CurriculumSchedule:
    if kind == "none":
        # task-focused baseline: ground-truth KL dominates, auxiliary terms low
        return flat_schedule(total_steps,
                             LossWeights(alpha=0.5, beta=0.5,
                                         lambda_distill=0.1, lambda_align=0.1))
    if kind == "two_phase":
        return two_phase_schedule(total_steps)
    if kind == "three_phase":
        p1 = max(1, int(total_steps * 0.3))
        p2 = max(1, int(total_steps * 0.2))
        p3 = max(1, total_steps - p1 - p2)
        return CurriculumSchedule(phases=(
            (p1, LossWeights(alpha=0.5, beta=0.5, lambda_distill=0.1, lambda_align=1.0)),
            (p2, LossWeights(alpha=0.5, beta=0.5, lambda_distill=1.0, lambda_align=1.0)),
            (p3, LossWeights(alpha=0.5, beta=0.5, lambda_distill=1.0, lambda_align=0.1)),
        ))
    raise ValueError(f"unknown curriculum kind {kind!r}")


def _schedule_signature(schedule: CurriculumSchedule) -> tuple:
    return tuple((steps, w.alpha, w.beta, w.lambda_distill, w.lambda_align)
                 for steps, w in schedule.phases)


def _joint_run(profile: AblationProfile, seed: int, train_size: int, t_s: int,
               schedule: CurriculumSchedule, teacher_cache: dict,
               run_cache: dict | None = None) -> float:
    run_key = (seed, train_size, t_s, _schedule_signature(schedule))
    if run_cache is not None and run_key in run_cache:
        return run_cache[run_key]
    model = _model_config()
    key = (seed, train_size)
    if key not in teacher_cache:
        dataset = gen_dataset(seed, train_size)
        tcfg = StageConfig(model=model,
                           hyper=OptimizerHyper(peak_lr=3e-3, warmup_steps=30,
                                                total_steps=profile.teacher_steps,
                                                weight_decay=0.01),
                           batch_size=profile.batch_size, seed=seed,
                           eval_queries=profile.eval_queries)
        teacher_cache[key] = (dataset, train_stage2_teacher(tcfg, dataset))
    dataset, teacher = teacher_cache[key]
    jcfg = StageConfig(model=model,
                       hyper=OptimizerHyper(peak_lr=1.5e-3, warmup_steps=40,
                                            total_steps=schedule.total_steps,
                                            weight_decay=0.01),
                       batch_size=profile.batch_size, seed=seed,
                       eval_queries=profile.eval_queries, t_s=t_s)
    ndcg = train_stage3_joint(jcfg, dataset, teacher.params, schedule=schedule).ndcg
    if run_cache is not None:
        run_cache[run_key] = ndcg
    return ndcg


def run_ablations(profile: AblationProfile | None = None) -> dict:
    """Measured NDCG grids over dataset size, t_s, loss combos, and curricula.

    Every row reports mean and standard deviation across the profile's seeds.
    The report is always produced in full, whether or not the expected trends
    show up; trend booleans ride along for the caller.
    """
    profile = profile or AblationProfile()
    teacher_cache: dict = {}
    run_cache: dict = {}
    sections: dict[str, list[dict]] = {}

    def row(section: str, label, values: list[float]) -> None:
        sections.setdefault(section, []).append({
            "label": label,
            "ndcg_mean": float(np.mean(values)),
            "ndcg_sd": float(np.std(values)),
            "seeds": list(profile.seeds),
        })

    for size in profile.dataset_sizes:
        vals = [_joint_run(profile, s, size, 1,
                           curriculum_schedule("two_phase", profile.joint_steps),
                           teacher_cache, run_cache) for s in profile.seeds]
        row("dataset_size", size, vals)

    for t_s in profile.t_s_grid:
        vals = [_joint_run(profile, s, profile.base_train_size, t_s,
                           curriculum_schedule("two_phase", profile.joint_steps),
                           teacher_cache, run_cache) for s in profile.seeds]
        row("t_s", t_s, vals)

    for combo in profile.loss_combos:
        weights = LossWeights(alpha=0.5, beta=0.5, **LOSS_COMBOS[combo])
        vals = [_joint_run(profile, s, profile.base_train_size, 1,
                           flat_schedule(profile.joint_steps, weights),
                           teacher_cache, run_cache) for s in profile.seeds]
        row("losses", combo, vals)

    for kind in profile.curricula:
        vals = [_joint_run(profile, s, profile.curriculum_train_size, 1,
                           curriculum_schedule(kind, profile.joint_steps),
                           teacher_cache, run_cache) for s in profile.seeds]
        row("curriculum", kind, vals)

    def mean_of(section: str, label) -> float:
        return next(r["ndcg_mean"] for r in sections[section] if r["label"] == label)

    trends = {}
    if len(profile.dataset_sizes) >= 2:
        trends["dataset_size_up"] = (
            mean_of("dataset_size", max(profile.dataset_sizes))
            >= mean_of("dataset_size", min(profile.dataset_sizes)) - 0.01)
    if 1 in profile.t_s_grid and 8 in profile.t_s_grid:
        trends["t_s_non_decreasing"] = mean_of("t_s", 8) >= mean_of("t_s", 1) - 0.01
    if {"sft_only", "distill_align"} <= set(profile.loss_combos):
        trends["aux_losses_help"] = (
            mean_of("losses", "distill_align") >= mean_of("losses", "sft_only") - 0.01)
    if {"none", "two_phase"} <= set(profile.curricula):
        trends["two_phase_helps"] = (
            mean_of("curriculum", "two_phase") >= mean_of("curriculum", "none"))
    return {"sections": sections, "trends": trends}


def format_ablation_report(report: dict) -> str:
    lines = []
    for section, rows in report["sections"].items():
        lines.append(f"[{section}]")
        for r in rows:
            lines.append(f"  {str(r['label']):>14}  NDCG@10 {r['ndcg_mean']:.4f} "
                         f"± {r['ndcg_sd']:.4f}  (seeds {r['seeds']})")
    lines.append("[trends]")
    for name, ok in report["trends"].items():
        lines.append(f"  {name:>22}  {'holds' if ok else 'FAILED'}")
    return "\n".join(lines)
