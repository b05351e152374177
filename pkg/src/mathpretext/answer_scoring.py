"""Fine-tuning/inference schemes over question + candidate answers.

ORIG scores the five options jointly through the 5-way head; AUG is ORIG
trained on sampled answer-order permutations; SEP-NC matches the question
against each candidate independently; SEP-C matches against a joint encoding
whose answer span has per-candidate position resets.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from itertools import permutations
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import LABELS, Problem
from .encoder import ModelBundle, batch_inputs
from .pretext import EncodedInput
from .tokenizer import CANDIDATE_SEPARATOR

logger = logging.getLogger(__name__)

SCHEME_ORIG = "ORIG"
SCHEME_AUG = "AUG"
SCHEME_SEP_NC = "SEP-NC"
SCHEME_SEP_C = "SEP-C"
SCHEMES = (SCHEME_ORIG, SCHEME_AUG, SCHEME_SEP_NC, SCHEME_SEP_C)

N_CANDIDATES = 5


class CandidateCountError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateSet:
    """Five option values (letter prefixes stripped) plus their source order."""

    values: tuple[str, ...]
    order: tuple[int, ...]

    def __post_init__(self):
        if len(self.values) != N_CANDIDATES:
            raise CandidateCountError(f"expected {N_CANDIDATES} candidates, got {len(self.values)}")
        if sorted(self.order) != list(range(N_CANDIDATES)):
            raise ValueError(f"order {self.order} is not a permutation of 0..4")

    @classmethod
    def from_problem(cls, problem: Problem) -> "CandidateSet":
        return cls(values=problem.option_values(), order=tuple(range(N_CANDIDATES)))

    def permuted(self, perm: Sequence[int]) -> "CandidateSet":
        return CandidateSet(
            values=tuple(self.values[p] for p in perm),
            order=tuple(self.order[p] for p in perm),
        )


@dataclass
class ScoredAnswer:
    """Per-candidate scores with the argmax choice (lowest index on ties)."""

    scores: list[float]
    chosen: int
    scheme: str

    @classmethod
    def from_scores(cls, scores: Sequence[float], scheme: str) -> "ScoredAnswer":
        scores = [float(s) for s in scores]
        return cls(scores=scores, chosen=int(np.argmax(scores)), scheme=scheme)


def assemble_qa_input(
    question: str,
    values: Sequence[str],
    tokenizer,
    max_len: int | None = None,
) -> EncodedInput:
    """[CLS] q [SEP] c1 ; c2 ; c3 ; c4 ; c5 [SEP] with monotone positions.

    Overflow truncates the question tail, never the candidates.
    """
    if len(values) != N_CANDIDATES:
        raise CandidateCountError(f"expected {N_CANDIDATES} candidates, got {len(values)}")
    vocab = tokenizer.vocab
    max_len = max_len or tokenizer.max_len
    q_tokens = tokenizer.tokenize(question)
    answer_tokens: list[str] = []
    for i, value in enumerate(values):
        if i > 0:
            answer_tokens.append(CANDIDATE_SEPARATOR)
        answer_tokens.extend(tokenizer.tokenize(value))

    overflow = len(q_tokens) + len(answer_tokens) + 3 - max_len
    if overflow > 0:
        if overflow >= len(q_tokens):
            raise ValueError(
                f"candidates alone need {len(answer_tokens) + 3} positions; cannot fit {max_len}"
            )
        logger.warning("truncating %d question tokens to fit the answer span", overflow)
        q_tokens = q_tokens[: len(q_tokens) - overflow]

    ids = (
        [vocab.cls_id]
        + [vocab.id(t) for t in q_tokens]
        + [vocab.sep_id]
        + [vocab.id(t) for t in answer_tokens]
        + [vocab.sep_id]
    )
    segments = [0] * (len(q_tokens) + 2) + [1] * (len(answer_tokens) + 1)
    n = len(ids)
    return EncodedInput(ids=ids, segments=segments, positions=list(range(n)), mask=[1] * n)


def sep_c_positions(values: Sequence[str], tokenizer) -> list[int]:
    """Position ids for the ';'-joined answer span with per-candidate resets.

    Each candidate's tokens count 0,1,2,... from its own start; a separator
    carries the last position of the candidate it follows, so the span's
    maximum position id is the longest candidate's length - 1 under any
    candidate order.
    """
    positions: list[int] = []
    for i, value in enumerate(values):
        tokens = tokenizer.tokenize(value)
        if i > 0:
            positions.append(positions[-1] if positions else 0)
        positions.extend(range(len(tokens)))
    return positions


def assemble_sep_c_input(
    question: str,
    values: Sequence[str],
    tokenizer,
    max_len: int | None = None,
) -> EncodedInput:
    """Joint question+answers encoding with the answer-span position reset."""
    enc = assemble_qa_input(question, values, tokenizer, max_len)
    span = sep_c_positions(values, tokenizer)
    answer_start = enc.segments.index(1)
    positions = list(enc.positions)
    positions[answer_start : answer_start + len(span)] = span
    # Final [SEP] stays inside the last candidate's numbering.
    positions[answer_start + len(span)] = span[-1] if span else 0
    return EncodedInput(ids=enc.ids, segments=enc.segments, positions=positions, mask=enc.mask)


def assemble_single_input(text: str, tokenizer, segment: int = 0, max_len: int | None = None) -> EncodedInput:
    """[CLS] tokens [SEP] for a standalone question or candidate encoding."""
    vocab = tokenizer.vocab
    max_len = max_len or tokenizer.max_len
    tokens = tokenizer.tokenize(text)
    if len(tokens) + 2 > max_len:
        tokens = tokens[: max_len - 2]
    ids = [vocab.cls_id] + [vocab.id(t) for t in tokens] + [vocab.sep_id]
    segments = [0] + [segment] * (len(tokens) + 1)
    n = len(ids)
    return EncodedInput(ids=ids, segments=segments, positions=list(range(n)), mask=[1] * n)


def augment_permutations(
    problem: Problem,
    rng: np.random.Generator,
    n: int = 25,
) -> list[Problem]:
    """Sample n distinct non-identity candidate permutations of the problem.

    The correct label is remapped per permutation; the source ordering itself
    is never emitted.
    """
    identity = tuple(range(N_CANDIDATES))
    pool = [p for p in permutations(range(N_CANDIDATES)) if p != identity]
    if n > len(pool):
        raise ValueError(f"cannot sample {n} distinct non-identity permutations (max {len(pool)})")
    picked = rng.choice(len(pool), size=n, replace=False)
    values = problem.option_values()
    variants = []
    for v, pi in enumerate(int(i) for i in picked):
        perm = pool[pi]
        options = tuple(f"{LABELS[k]}){values[perm[k]]}" for k in range(N_CANDIDATES))
        correct = LABELS[perm.index(problem.correct_index)]
        variants.append(
            Problem(
                id=f"{problem.id}@aug{v}",
                question=problem.question,
                options=options,
                rationale=problem.rationale,
                correct=correct,
            )
        )
    return variants


# --- scoring -----------------------------------------------------------------


def score_problems(
    bundle: ModelBundle,
    problems: Sequence[Problem],
    scheme: str,
    tokenizer,
    batch_size: int = 16,
) -> list[ScoredAnswer]:
    """Score every problem under one scheme in eval mode (no gradients)."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    was_training = bundle.training
    bundle.eval()
    try:
        with torch.no_grad():
            if scheme in (SCHEME_ORIG, SCHEME_AUG):
                scored = _score_joint(bundle, problems, scheme, tokenizer, batch_size)
            else:
                scored = _score_sep(bundle, problems, scheme, tokenizer, batch_size)
    finally:
        if was_training:
            bundle.train()
    return scored


def _score_joint(bundle, problems, scheme, tokenizer, batch_size) -> list[ScoredAnswer]:
    scored = []
    for start in range(0, len(problems), batch_size):
        chunk = problems[start : start + batch_size]
        encs = [assemble_qa_input(p.question, p.option_values(), tokenizer) for p in chunk]
        _, cls_state = bundle.forward_states(batch_inputs(encs, device=bundle.device))
        probs = bundle.qa_forward(cls_state).cpu().numpy()
        scored.extend(ScoredAnswer.from_scores(row, scheme) for row in probs)
    return scored


def _score_sep(bundle, problems, scheme, tokenizer, batch_size) -> list[ScoredAnswer]:
    scored = []
    for start in range(0, len(problems), max(1, batch_size // N_CANDIDATES)):
        chunk = problems[start : start + max(1, batch_size // N_CANDIDATES)]
        lefts, rights = [], []
        for p in chunk:
            values = p.option_values()
            if scheme == SCHEME_SEP_NC:
                left = assemble_single_input(p.question, tokenizer, segment=0)
            else:
                left = assemble_sep_c_input(p.question, values, tokenizer)
            for value in values:
                lefts.append(left)
                rights.append(assemble_single_input(value, tokenizer, segment=1))
        _, cls_left = bundle.forward_states(batch_inputs(lefts, device=bundle.device))
        _, cls_right = bundle.forward_states(batch_inputs(rights, device=bundle.device))
        scores = bundle.match_score(cls_left, cls_right).cpu().numpy()
        for i in range(len(chunk)):
            scored.append(
                ScoredAnswer.from_scores(scores[i * N_CANDIDATES : (i + 1) * N_CANDIDATES], scheme)
            )
    return scored


def sep_nc_score(bundle: ModelBundle, question: str, candidate: str, tokenizer) -> float:
    """Match score for one (question, candidate) pair; independent of the
    other four candidates by construction."""
    with torch.no_grad():
        _, cls_q = bundle.encode(assemble_single_input(question, tokenizer, segment=0))
        _, cls_c = bundle.encode(assemble_single_input(candidate, tokenizer, segment=1))
        return float(bundle.match_score(cls_q[None, :], cls_c[None, :])[0])


def sep_c_score(
    bundle: ModelBundle,
    question: str,
    values: Sequence[str],
    candidate: str,
    tokenizer,
) -> float:
    """Match score of one candidate against the position-reset joint encoding."""
    values = tuple(values)
    if candidate not in values:
        raise ValueError(f"candidate {candidate!r} not among the five values")
    with torch.no_grad():
        _, cls_joint = bundle.encode(assemble_sep_c_input(question, values, tokenizer))
        _, cls_c = bundle.encode(assemble_single_input(candidate, tokenizer, segment=1))
        return float(bundle.match_score(cls_joint[None, :], cls_c[None, :])[0])


# --- prediction dumps ---------------------------------------------------------
#
# JSON-lines contract consumed by the evaluation module and external tools:
# {problem_id, scheme, scores:[5], chosen, correct} with 0-based indices.


def prediction_rows(
    problems: Sequence[Problem],
    scored: Sequence[ScoredAnswer],
) -> list[dict]:
    rows = []
    for problem, answer in zip(problems, scored):
        rows.append(
            {
                "problem_id": problem.id,
                "scheme": answer.scheme,
                "scores": [round(s, 8) for s in answer.scores],
                "chosen": answer.chosen,
                "correct": problem.correct_index,
            }
        )
    return rows


def write_predictions(path: str | Path, rows: Sequence[dict]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_predictions(path: str | Path) -> list[dict]:
    rows = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
