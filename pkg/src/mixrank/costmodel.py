"""Closed-form attention / linear-layer cost for the three serving regimes.

Two expression families:

* proportional: the reporting forms, quadratic ``L**2`` attention with
  architecture constants dropped;
* exact-causal: ``L * (L + 1) / 2`` pair counting that the engine's measured
  counters must match exactly.

``naive`` runs every item as an independent prefix+item sequence;
``amortized_full`` prefills the shared prefix once and lets full-text items
attend to it; ``amortized_mixlm`` does the same with items compressed to
``ceil(t_i / k)`` prompt tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

REGIMES = ("naive", "amortized_full", "amortized_mixlm")


@dataclass(frozen=True)
class CostParams:
    t_q: int  # shared prefix tokens
    t_i: int  # full item-text tokens
    n_i: int  # ranking depth (items per query)
    k: int = 1  # compression factor; 1 means full text

    def __post_init__(self):
        if min(self.t_q, self.t_i, self.n_i) <= 0:
            raise ValueError("t_q, t_i, n_i must be positive")
        if self.k < 1:
            raise ValueError("compression factor k must be >= 1")

    def item_prompt_tokens(self, regime: str) -> int:
        """Item-side tokens actually present in the prompt, rounded up."""
        _check_regime(regime)
        if regime == "amortized_mixlm":
            return math.ceil(self.t_i / self.k)
        return self.t_i


def _check_regime(regime: str) -> None:
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")


def proportional_cost(regime: str, t_q, n_i, item_len):
    """Reporting forms over the per-item prompt length; symbolic-friendly.

    For naive / amortized_full the item prompt length is the full item text;
    for amortized_mixlm pass the compressed length (t_i / k).
    """
    _check_regime(regime)
    if regime == "naive":
        return n_i * (t_q + item_len) ** 2, n_i * (t_q + item_len)
    attention = t_q**2 + n_i * (2 * item_len * t_q + item_len**2)
    linear = t_q + n_i * item_len
    return attention, linear


def exact_causal_cost(regime: str, t_q: int, n_i: int, item_len: int) -> tuple[int, int]:
    """Pair-exact forms matching the engine's measured counters."""
    _check_regime(regime)
    if regime == "naive":
        seq = t_q + item_len
        return n_i * seq * (seq + 1) // 2, n_i * seq
    attention = t_q * (t_q + 1) // 2 + n_i * (item_len * t_q + item_len * (item_len + 1) // 2)
    linear = t_q + n_i * item_len
    return attention, linear


def predict(params: CostParams, regime: str) -> tuple[int, int]:
    """Proportional-form (attention, linear) cost for one query batch."""
    return proportional_cost(regime, params.t_q, params.n_i,
                             params.item_prompt_tokens(regime))


def predict_exact(params: CostParams, regime: str) -> tuple[int, int]:
    """Exact-causal (attention_pairs, linear_rows) for one query batch."""
    return exact_causal_cost(regime, params.t_q, params.n_i,
                             params.item_prompt_tokens(regime))


def speedup(params: CostParams, regime_a: str, regime_b: str) -> tuple[float, float]:
    """Cost ratios a/b: (attention_ratio, linear_ratio)."""
    att_a, lin_a = predict(params, regime_a)
    att_b, lin_b = predict(params, regime_b)
    if att_b == 0 or lin_b == 0:
        raise ValueError("regime_b has zero cost; ratio undefined")
    return att_a / att_b, lin_a / lin_b


def cost_table(params: CostParams) -> list[dict]:
    """One row per regime with both expression families; CLI-facing."""
    rows = []
    for regime in REGIMES:
        att_p, lin_p = predict(params, regime)
        att_e, lin_e = predict_exact(params, regime)
        rows.append({
            "regime": regime,
            "item_prompt_tokens": params.item_prompt_tokens(regime),
            "attention_proportional": att_p,
            "linear_proportional": lin_p,
            "attention_pairs_exact": att_e,
            "linear_rows_exact": lin_e,
        })
    return rows
