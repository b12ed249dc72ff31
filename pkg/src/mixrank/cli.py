"""Command-line entry point.

Subcommands: train-teacher, train-joint, encode, serve, score, bench,
costmodel, ablate. Training runs persist the resolved config, per-step
metrics (line-delimited JSON), checkpoints, and a summary next to their
outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .bench import AblationProfile, BenchSpec, bench, bench_model, bench_service, format_ablation_report, run_ablations
from .cache import EmbeddingCache, refresh
from .checkpoint import load_params, save_params
from .config import RunConfig, write_metrics
from .costmodel import CostParams, cost_table, speedup
from .data import gen_dataset
from .mix import DEFAULT_TOKENIZER
from .service import CachedRef, Client, InlineText, ScoringService
from .train import StageConfig, train_stage2_teacher, train_stage3_joint


def _stage_config(cfg: RunConfig, stage: str) -> StageConfig:
    return StageConfig(
        model=cfg.model,
        hyper=cfg.teacher if stage == "teacher" else cfg.joint,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        eval_seed=cfg.data.eval_seed,
        eval_queries=cfg.data.eval_queries,
        t_s=cfg.t_s,
    )


def cmd_train_teacher(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    cfg.save_resolved(out)
    dataset = gen_dataset(cfg.data.seed, cfg.data.train_size)
    result = train_stage2_teacher(_stage_config(cfg, "teacher"), dataset)
    version = save_params(out / "teacher.ckpt", result.params, {"stage": "teacher"})
    write_metrics(out, result.history)
    summary = {"ndcg_at_10": result.ndcg, "version": version,
               "final_loss": result.history[-1]["loss_sft"]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"teacher NDCG@10 {result.ndcg:.4f}  checkpoint {out / 'teacher.ckpt'} ({version})")
    return 0


def cmd_train_joint(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    cfg.save_resolved(out)
    dataset = gen_dataset(cfg.data.seed, cfg.data.train_size)
    teacher, _ = load_params(args.teacher)
    result = train_stage3_joint(_stage_config(cfg, "joint"), dataset, teacher,
                                schedule=cfg.schedule())
    ranker_version = save_params(out / "ranker.ckpt", result.params, {"stage": "ranker"})
    encoder_version = save_params(out / "encoder.ckpt", result.encoder, {"stage": "encoder"})
    write_metrics(out, result.history)
    summary = {"ndcg_at_10": result.ndcg, "ranker_version": ranker_version,
               "encoder_version": encoder_version}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"student NDCG@10 {result.ndcg:.4f}  ranker {ranker_version} "
          f"encoder {encoder_version}")
    return 0


def cmd_encode(args) -> int:
    encoder, meta = load_params(args.checkpoint)
    items = json.loads(Path(args.items).read_text())
    cache = EmbeddingCache(hidden=encoder.config.hidden, path=args.cache)
    result = refresh(cache, encoder, [(e["id"], e["tokens"]) for e in items],
                     t_s=args.t_s, model_version=meta.get("version"))
    for item_id, message in result.errors:
        print(f"error {item_id}: {message}", file=sys.stderr)
    print(f"updated {result.updated} embeddings "
          f"(version {meta.get('version')}, cache {args.cache})")
    return 0 if not result.errors else 1


def cmd_serve(args) -> int:
    ranker, _ = load_params(args.checkpoint)
    version = args.model_version
    if version is None and args.encoder:
        _, enc_meta = load_params(args.encoder)
        version = enc_meta.get("version")
    if version is None:
        raise SystemExit("serve needs --model-version or --encoder")
    cache = EmbeddingCache(hidden=ranker.config.hidden, path=args.cache)
    service = ScoringService(ranker, cache, model_version=version,
                             workers=args.workers, pool_pages=args.pool_pages,
                             page_size=args.page_size)
    host, port = service.start(args.host, args.port)
    print(f"listening on {host}:{port} with {args.workers} workers "
          f"({args.pool_pages} pages each); cache {args.cache} version {version}",
          flush=True)
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        service.stop()
    return 0


def _parse_tokens(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def cmd_score(args) -> int:
    query = _parse_tokens(args.query)
    prefix = DEFAULT_TOKENIZER.ranker_prefix(query)
    items = []
    for item_id in args.item_id or []:
        items.append(CachedRef(item_id))
    for text in args.item_tokens or []:
        items.append(InlineText(tuple(_parse_tokens(text))))
    if not items:
        raise SystemExit("give at least one --item-id or --item-tokens")
    with Client(args.host, args.port) as client:
        response = client.score(prefix, items, mode=args.mode)
    for ref, p, err in zip(items, response.p_yes, response.errors):
        name = ref.item_id if isinstance(ref, CachedRef) else "inline"
        print(f"{name}: " + (f"p_yes={p:.6f}" if err is None else f"error: {err}"))
    print(json.dumps({"report": response.report, "mode": response.mode}))
    return 0


def cmd_bench(args) -> int:
    spec = BenchSpec(repetitions=args.reps, seed=args.seed)
    model = bench_model(seed=args.seed)
    records = bench(model, spec, modes=tuple(args.modes))
    if args.clients:
        from .model import init_params
        service_record = bench_service(spec, init_params(model.config, seed=args.seed),
                                       clients=args.clients)
        records.append({"representation": "mixlm", "via": "service", **service_record})
    lines = [json.dumps(r, sort_keys=True) for r in records]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"{'representation':>14} {'mode':>14} {'items/s':>12} {'mean ms':>9} "
          f"{'p99 ms':>9} {'att pairs':>12}")
    for r in records:
        if r.get("via") == "service":
            print(f"{'mixlm':>14} {'service x' + str(r['clients']):>14} "
                  f"{r['items_per_sec']:>12.1f}")
            continue
        print(f"{r['representation']:>14} {r['mode']:>14} {r['items_per_sec']:>12.1f} "
              f"{r['mean_latency_ms']:>9.2f} {r['p99_latency_ms']:>9.2f} "
              f"{r['report']['attention_pairs']:>12}")
    return 0


def cmd_costmodel(args) -> int:
    params = CostParams(t_q=args.tq, t_i=args.ti, n_i=args.ni, k=args.k)
    rows = cost_table(params)
    print(f"{'regime':>18} {'item tokens':>12} {'attention ∝':>14} {'linear ∝':>10} "
          f"{'pairs exact':>12} {'rows exact':>11}")
    for r in rows:
        print(f"{r['regime']:>18} {r['item_prompt_tokens']:>12} "
              f"{r['attention_proportional']:>14} {r['linear_proportional']:>10} "
              f"{r['attention_pairs_exact']:>12} {r['linear_rows_exact']:>11}")
    att_ratio, lin_ratio = speedup(params, "naive", "amortized_mixlm")
    print(f"naive / amortized_mixlm: attention {att_ratio:.1f}x, linear {lin_ratio:.1f}x")
    return 0


def cmd_ablate(args) -> int:
    profile = AblationProfile.quick() if args.quick else AblationProfile()
    report = run_ablations(profile)
    text = format_ablation_report(report)
    print(text)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixrank",
                                     description="mixed text-embedding ranking toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="stage II: full-text teacher SFT")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("train-joint", help="stage III: joint encoder+ranker training")
    p.add_argument("--config", default=None)
    p.add_argument("--teacher", required=True, help="teacher checkpoint path")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train_joint)

    p = sub.add_parser("encode", help="refresh nearline embeddings for changed items")
    p.add_argument("--checkpoint", required=True, help="encoder checkpoint")
    p.add_argument("--items", required=True, help="JSON: [{id, tokens}, ...]")
    p.add_argument("--cache", required=True, help="cache log path")
    p.add_argument("--t-s", type=int, default=1, dest="t_s")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("serve", help="run the scoring service")
    p.add_argument("--checkpoint", required=True, help="ranker checkpoint")
    p.add_argument("--cache", required=True)
    p.add_argument("--model-version", default=None)
    p.add_argument("--encoder", default=None, help="encoder checkpoint (derives version)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7431)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--pool-pages", type=int, default=512)
    p.add_argument("--page-size", type=int, default=16)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("score", help="score items against a query via the service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7431)
    p.add_argument("--query", required=True, help="query tokens, e.g. '1 2 3 4'")
    p.add_argument("--item-id", action="append")
    p.add_argument("--item-tokens", action="append")
    p.add_argument("--mode", default="prefix_cached",
                   choices=["naive", "prefix_cached", "multi_item"])
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("bench", help="throughput benchmark over representations x modes")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clients", type=int, default=0,
                   help="also drive a live service with N concurrent clients")
    p.add_argument("--modes", nargs="+", default=["naive", "prefix_cached", "multi_item"],
                   choices=["naive", "prefix_cached", "multi_item"])
    p.add_argument("--out", default=None, help="write line-delimited records here")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("costmodel", help="closed-form cost table for one shape")
    p.add_argument("--tq", type=int, required=True)
    p.add_argument("--ti", type=int, required=True)
    p.add_argument("--ni", type=int, required=True)
    p.add_argument("--k", type=int, default=1)
    p.set_defaults(fn=cmd_costmodel)

    p = sub.add_parser("ablate", help="training ablation grids (NDCG mean ± sd)")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
