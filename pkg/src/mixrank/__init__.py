"""Mixed text-embedding ranking: models, training, and a prefill-only scoring engine."""

from .autodiff import Tensor
from .cache import EmbeddingCache, refresh
from .costmodel import CostParams, predict, predict_exact, speedup
from .data import Example, JudgeOracle, gen_dataset, gen_eval_queries
from .engine import (
    CostReport,
    EngineModel,
    ItemSpec,
    KVPool,
    ScoringBatch,
    release,
    score_multi_item,
    score_naive,
    score_prefix_cached,
)
from .losses import CurriculumSchedule, LossWeights, kl, loss_align, loss_sft, loss_total, weights_at
from .mix import (
    EmbeddedItem,
    MixedPrompt,
    TextItem,
    Tokenizer,
    assemble_mixed,
    encode_item,
    score_fulltext,
    score_mixed,
)
from .model import MaskPolicy, ModelConfig, Params, binary_head, embed_tokens, forward_hidden, init_params
from .optim import AdamW, OptimizerHyper, lr_at
from .payload import decode_payload, encode_payload
from .service import CachedRef, Client, InlineRows, InlineText, ScoreRequest, ScoringService, route
from .train import ndcg_at_10, train_stage2_teacher, train_stage3_joint

__version__ = "0.1.0"

__all__ = [
    "AdamW", "CachedRef", "Client", "CostParams", "CostReport", "CurriculumSchedule",
    "EmbeddedItem", "EmbeddingCache", "EngineModel", "Example", "InlineRows",
    "InlineText", "ItemSpec", "JudgeOracle", "KVPool", "LossWeights", "MaskPolicy",
    "MixedPrompt", "ModelConfig", "OptimizerHyper", "Params", "ScoreRequest",
    "ScoringBatch", "ScoringService", "Tensor", "TextItem", "Tokenizer",
    "assemble_mixed", "binary_head", "decode_payload", "embed_tokens", "encode_item",
    "encode_payload", "forward_hidden", "gen_dataset", "gen_eval_queries",
    "init_params", "kl", "loss_align", "loss_sft", "loss_total", "lr_at",
    "ndcg_at_10", "predict", "predict_exact", "refresh", "release", "route",
    "score_fulltext", "score_mixed", "score_multi_item", "score_naive",
    "score_prefix_cached", "speedup", "train_stage2_teacher", "train_stage3_joint",
    "weights_at",
]
