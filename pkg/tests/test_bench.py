import json

import numpy as np
import pytest

from mixrank.bench import (
    BenchSpec,
    bench,
    bench_cost_params,
    bench_model,
    build_batch,
    curriculum_schedule,
)
from mixrank.costmodel import predict_exact
from mixrank.engine import EngineModel, score_prefix_cached
from mixrank.model import ModelConfig, init_params

TINY = BenchSpec(t_q=8, n_i=3,
                 representations={"fulltext": 12, "summarized": 6, "mixlm": 2},
                 repetitions=1, warmup=0)


@pytest.fixture(scope="module")
def small_model():
    cfg = ModelConfig(vocab_size=67, hidden=16, layers=2, heads=2, ffn_mult=2.0,
                      max_seq=4096)
    return EngineModel(init_params(cfg, seed=9))


class TestBenchSpec:
    def test_defaults_mirror_reference_shape(self):
        spec = BenchSpec()
        assert spec.t_q == 60 and spec.n_i == 50
        assert spec.representations == {"fulltext": 766, "summarized": 145, "mixlm": 2}

    def test_validation(self):
        with pytest.raises(ValueError):
            BenchSpec(t_q=1)
        with pytest.raises(ValueError):
            BenchSpec(representations={})


class TestBuildBatch:
    def test_footprints_include_eoi(self, small_model, rng):
        for rep, want in TINY.representations.items():
            batch = build_batch(TINY, rep, small_model.config.hidden, rng)
            assert batch.item_lengths == [want] * TINY.n_i
        assert len(build_batch(TINY, "fulltext", 16, rng).shared_prefix) == TINY.t_q

    def test_mixlm_uses_embedding_rows(self, small_model, rng):
        batch = build_batch(TINY, "mixlm", small_model.config.hidden, rng)
        assert all(item.embed_rows is not None and item.embed_rows.shape[0] == 1
                   for item in batch.items)


class TestBenchRun:
    def test_records_shape_and_counters(self, small_model):
        records = bench(small_model, TINY)
        assert len(records) == 9  # 3 representations x 3 modes
        by_key = {(r["representation"], r["mode"]): r for r in records}
        for rep in TINY.representations:
            naive = by_key[(rep, "naive")]["report"]["attention_pairs"]
            cached = by_key[(rep, "prefix_cached")]["report"]["attention_pairs"]
            multi = by_key[(rep, "multi_item")]["report"]["attention_pairs"]
            assert naive >= cached == multi
        assert all(r["items_per_sec"] > 0 for r in records)
        assert all(json.dumps(r) for r in records)  # records are serializable

    def test_reference_mixlm_counter(self):
        # prefix-cached pairs at (T_q=60, item footprint 2, N_i=50)
        spec = BenchSpec(repetitions=1, warmup=0)
        model = bench_model(seed=0)
        batch = build_batch(spec, "mixlm", model.config.hidden, np.random.default_rng(0))
        _, report = score_prefix_cached(model, batch)
        assert report.attention_pairs == 1830 + 50 * (2 * 60 + 3) == 7980
        assert report.linear_rows == 60 + 50 * 2

    def test_fulltext_vs_mixlm_pair_ratio(self):
        spec = BenchSpec()
        full = predict_exact(bench_cost_params(spec, "fulltext"), "amortized_full")[0]
        mix_params = bench_cost_params(spec, "mixlm")
        assert mix_params.item_prompt_tokens("amortized_mixlm") == 2
        mix = predict_exact(mix_params, "amortized_mixlm")[0]
        assert full == 1830 + 50 * (766 * 60 + 766 * 767 // 2)
        assert mix == 7980
        assert full / mix == pytest.approx(2129, abs=1.0)


def test_bench_via_service_concurrent_clients():
    from mixrank.bench import bench_service
    from mixrank.model import init_params

    spec = BenchSpec(t_q=8, n_i=4, repetitions=2, representations={"mixlm": 2})
    cfg = ModelConfig(vocab_size=67, hidden=16, layers=2, heads=2, ffn_mult=2.0,
                      max_seq=256)
    record = bench_service(spec, init_params(cfg, seed=0), clients=3, workers=2)
    assert record["total_items"] == 3 * 8 * 4  # clients x requests x items
    assert record["items_per_sec"] > 0


def test_ablation_report_shape():
    from mixrank.bench import AblationProfile, run_ablations

    tiny = AblationProfile(seeds=(0,), dataset_sizes=(200,), t_s_grid=(1, 2),
                           loss_combos=("sft_only",), curricula=("none",),
                           base_train_size=200, teacher_steps=10, joint_steps=10,
                           eval_queries=5)
    report = run_ablations(tiny)
    assert [r["label"] for r in report["sections"]["t_s"]] == [1, 2]  # one row per value
    assert {"dataset_size", "t_s", "losses", "curriculum"} <= set(report["sections"])
    for rows in report["sections"].values():
        for r in rows:
            assert 0.0 <= r["ndcg_mean"] <= 1.0 and r["ndcg_sd"] >= 0.0
    # trends needing absent grid points are simply not reported
    assert "aux_losses_help" not in report["trends"]


def test_curriculum_kinds():
    assert curriculum_schedule("none", 10).total_steps == 10
    assert len(curriculum_schedule("two_phase", 10).phases) == 2
    assert len(curriculum_schedule("three_phase", 10).phases) == 3
    with pytest.raises(ValueError):
        curriculum_schedule("four_phase", 10)
