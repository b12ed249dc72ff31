"""Synthetic graded-relevance data.

A deterministic judge stands in for a production relevance model: tokens
0..15 are "skills", a query is four distinct skills, and an item's grade is
the number of query skills it contains, capped at 4. Grades map linearly to
p* = (grade/4, 1 - grade/4). Items pad to a fixed 24 tokens with distractor
skills (not in the query) and non-skill filler so the grade signal cannot be
read off token counts alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

Q_LEN = 4
ITEM_LEN = 24
MAX_GRADE = 4


@dataclass(frozen=True)
class JudgeOracle:
    """Deterministic 5-point grader over skill-token overlap."""

    skill_limit: int = 16  # token ids [0, skill_limit) are skills

    def skills(self, tokens: Sequence[int]) -> frozenset[int]:
        return frozenset(t for t in tokens if t < self.skill_limit)

    def grade(self, q_tokens: Sequence[int], item_tokens: Sequence[int]) -> int:
        overlap = self.skills(q_tokens) & self.skills(item_tokens)
        return min(MAX_GRADE, len(overlap))


ORACLE = JudgeOracle()


@dataclass(frozen=True)
class Example:
    q_tokens: tuple[int, ...]
    item_tokens: tuple[int, ...]
    grade: int

    @property
    def p_star(self) -> np.ndarray:
        p = self.grade / MAX_GRADE
        return np.array([p, 1.0 - p])


@dataclass(frozen=True)
class EvalQuery:
    q_tokens: tuple[int, ...]
    items: tuple[tuple[tuple[int, ...], int], ...]  # (item_tokens, grade) pairs


def _gen_item(rng: np.random.Generator, q: np.ndarray, target_grade: int) -> tuple[int, ...]:
    matched = rng.choice(q, size=target_grade, replace=False)
    non_q_skills = np.setdiff1d(np.arange(ORACLE.skill_limit), q)
    n_distract = int(rng.integers(0, 4))
    distractors = rng.choice(non_q_skills, size=n_distract, replace=False)
    filler = rng.integers(ORACLE.skill_limit, 64, size=ITEM_LEN - target_grade - n_distract)
    item = np.concatenate([matched, distractors, filler])
    rng.shuffle(item)
    return tuple(int(t) for t in item)


def _gen_query(rng: np.random.Generator) -> np.ndarray:
    return rng.choice(ORACLE.skill_limit, size=Q_LEN, replace=False)


def gen_dataset(seed: int, n: int) -> list[Example]:
    """Deterministic list of `n` graded query-item pairs."""
    if n <= 0:
        raise ValueError("dataset size must be positive")
    rng = np.random.default_rng(seed)
    out: list[Example] = []
    for _ in range(n):
        q = _gen_query(rng)
        target = int(rng.integers(0, MAX_GRADE + 1))
        item = _gen_item(rng, q, target)
        grade = ORACLE.grade(q, item)
        out.append(Example(q_tokens=tuple(int(t) for t in q),
                           item_tokens=item, grade=grade))
    return out


def gen_eval_queries(seed: int, n_queries: int, items_per_query: int = 10) -> list[EvalQuery]:
    """Held-out ranking tasks: each query paired with a graded candidate list."""
    rng = np.random.default_rng(seed)
    queries: list[EvalQuery] = []
    for _ in range(n_queries):
        q = _gen_query(rng)
        items = []
        for _ in range(items_per_query):
            target = int(rng.integers(0, MAX_GRADE + 1))
            item = _gen_item(rng, q, target)
            items.append((item, ORACLE.grade(q, item)))
        queries.append(EvalQuery(q_tokens=tuple(int(t) for t in q), items=tuple(items)))
    return queries


def as_batches(examples: list[Example], batch_size: int, rng: np.random.Generator):
    """Shuffled minibatch arrays (q (B, Q_LEN), items (B, ITEM_LEN), p_star (B, 2))."""
    order = rng.permutation(len(examples))
    for lo in range(0, len(examples) - batch_size + 1, batch_size):
        idx = order[lo:lo + batch_size]
        chunk = [examples[i] for i in idx]
        yield (idx,
               np.array([e.q_tokens for e in chunk], dtype=np.int64),
               np.array([e.item_tokens for e in chunk], dtype=np.int64),
               np.array([e.p_star for e in chunk]))
