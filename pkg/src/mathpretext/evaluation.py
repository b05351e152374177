"""Accuracy, permutation-consistency testing, difficulty analysis, dev/test
correlation diagnostics, and embedding export.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .answer_scoring import assemble_single_input, prediction_rows, score_problems
from .corpus import LABELS, Problem

logger = logging.getLogger(__name__)

VARIANT_SEP = "#"

DIFFICULTY_GROUPS = {"Easy": (1,), "Medium": (2, 3), "Hard": (4, 5)}

OPERATORS = "+-*/"


class MissingPredictionsError(ValueError):
    pass


class PartialCoverageError(ValueError):
    pass


@dataclass
class ConsistencyReport:
    """Per-problem variant outcomes; score = fraction with all five correct."""

    rows: list[dict]
    score: float
    n_problems: int


@dataclass
class DifficultyReport:
    """Rank of the correct answer per problem plus the coarse grouping."""

    ranks: list[int]
    histogram: dict[int, int]
    groups: dict[str, int]
    n_problems: int


def accuracy(rows: Sequence[dict], fold: Sequence[Problem] | None = None) -> float:
    """Fraction of dump rows with chosen == correct; optionally verifies the
    dump covers the fold."""
    if fold is not None:
        have = {r["problem_id"] for r in rows}
        missing = [p.id for p in fold if p.id not in have]
        if missing:
            raise MissingPredictionsError(f"{len(missing)} fold problems lack predictions")
    if not rows:
        raise MissingPredictionsError("empty prediction dump")
    return sum(1 for r in rows if r["chosen"] == r["correct"]) / len(rows)


def perm_variants(problem: Problem) -> list[Problem]:
    """Five problems placing the correct value at each position via a swap.

    Variant i swaps the correct value with the value at position i (identity
    when i is the source correct position); its correct label is i.
    """
    values = list(problem.option_values())
    c = problem.correct_index
    variants = []
    for i in range(5):
        moved = list(values)
        moved[i], moved[c] = moved[c], moved[i]
        options = tuple(f"{LABELS[k]}){moved[k]}" for k in range(5))
        variants.append(
            Problem(
                id=f"{problem.id}{VARIANT_SEP}{LABELS[i]}",
                question=problem.question,
                options=options,
                rationale=problem.rationale,
                correct=LABELS[i],
            )
        )
    return variants


def consistency_from_arrays(chosen: np.ndarray, correct: np.ndarray) -> float:
    """Fraction of rows where every one of the five variants is solved."""
    return float(np.all(chosen == correct, axis=1).mean())


def consistency_from_dump(rows: Sequence[dict]) -> ConsistencyReport:
    """Group variant rows by source problem (ids '<src>#<label>') and score."""
    by_problem: dict[str, dict[str, dict]] = {}
    for row in rows:
        pid = row["problem_id"]
        if VARIANT_SEP not in pid:
            raise PartialCoverageError(f"row id {pid!r} carries no variant label")
        src, label = pid.rsplit(VARIANT_SEP, 1)
        by_problem.setdefault(src, {})[label] = row
    report_rows = []
    chosen = np.empty((len(by_problem), 5), dtype=np.int64)
    correct = np.empty((len(by_problem), 5), dtype=np.int64)
    for i, (src, variants) in enumerate(sorted(by_problem.items())):
        if sorted(variants) != list(LABELS):
            raise PartialCoverageError(f"problem {src!r} has variants {sorted(variants)}, need all of A..E")
        for j, label in enumerate(LABELS):
            chosen[i, j] = variants[label]["chosen"]
            correct[i, j] = variants[label]["correct"]
        report_rows.append(
            {
                "problem_id": src,
                "predictions": [int(chosen[i, j]) for j in range(5)],
                "all_correct": bool(np.all(chosen[i] == correct[i])),
            }
        )
    return ConsistencyReport(
        rows=report_rows,
        score=consistency_from_arrays(chosen, correct),
        n_problems=len(by_problem),
    )


def evaluate_consistency(
    bundle,
    problems: Sequence[Problem],
    scheme: str,
    tokenizer,
    batch_size: int = 16,
) -> tuple[ConsistencyReport, list[dict]]:
    """Score all 5*n permutation variants with the model and aggregate."""
    variants = [v for p in problems for v in perm_variants(p)]
    scored = score_problems(bundle, variants, scheme, tokenizer, batch_size)
    rows = prediction_rows(variants, scored)
    return consistency_from_dump(rows), rows


def difficulty_rank(scores: Sequence[float], correct: int) -> int:
    """1 + strictly-better candidates, ties counting only earlier indices.

    Mirrors the argmax tie rule so rank 1 coincides exactly with a solved
    problem.
    """
    s = np.asarray(scores, dtype=float)
    better = int((s > s[correct]).sum())
    tied_earlier = int((s[:correct] == s[correct]).sum())
    return 1 + better + tied_earlier


def difficulty_report(rows: Sequence[dict]) -> DifficultyReport:
    """Histogram of correct-answer ranks D1..D5 with the Easy/Medium/Hard
    grouping used for the human-study buckets."""
    ranks = []
    for row in rows:
        if "scores" not in row or len(row["scores"]) != 5:
            raise MissingPredictionsError(f"row {row.get('problem_id')!r} lacks 5 scores")
        ranks.append(difficulty_rank(row["scores"], row["correct"]))
    histogram = {d: 0 for d in range(1, 6)}
    for r in ranks:
        histogram[r] += 1
    groups = {
        name: sum(histogram[d] for d in members) for name, members in DIFFICULTY_GROUPS.items()
    }
    return DifficultyReport(ranks=ranks, histogram=histogram, groups=groups, n_problems=len(ranks))


def dev_test_correlation(trajectory: Sequence[tuple[float, float]]) -> float:
    """Pearson r between per-epoch validation and test accuracies."""
    if len(trajectory) < 3:
        raise ValueError("need at least 3 epochs to correlate")
    val = np.asarray([t[0] for t in trajectory], dtype=float)
    test = np.asarray([t[1] for t in trajectory], dtype=float)
    if np.ptp(val) == 0 or np.ptp(test) == 0:
        raise ValueError("zero variance in one of the accuracy sequences")
    return float(np.corrcoef(val, test)[0, 1])


# --- embeddings ----------------------------------------------------------------


def single_operator_label(rationale: str) -> str | None:
    """The rationale's lone arithmetic operator among + - * /, else None.

    A '-' directly followed by a digit with no left operand is a negative-number
    sign, not an operator.
    """
    ops = []
    prev_significant = None
    for i, ch in enumerate(rationale):
        if ch in OPERATORS:
            if ch == "-":
                nxt = rationale[i + 1] if i + 1 < len(rationale) else ""
                has_left = prev_significant is not None and (
                    prev_significant.isdigit() or prev_significant == ")"
                )
                if nxt.isdigit() and not has_left:
                    prev_significant = ch
                    continue
            ops.append(ch)
        if not ch.isspace():
            prev_significant = ch
    if len(ops) == 1:
        return ops[0]
    return None


def export_embeddings(
    bundle,
    problems: Sequence[Problem],
    tokenizer,
    limit: int = 2500,
    rng: np.random.Generator | None = None,
    batch_size: int = 32,
) -> tuple[np.ndarray, list[str], list[str]]:
    """[CLS] embedding per single-operator question: (matrix, labels, ids)."""
    import torch

    selected = [(p, single_operator_label(p.rationale)) for p in problems]
    selected = [(p, op) for p, op in selected if op is not None]
    if len(selected) > limit:
        rng = rng or np.random.default_rng(0)
        keep = sorted(rng.choice(len(selected), size=limit, replace=False).tolist())
        selected = [selected[i] for i in keep]
    elif len(selected) < limit:
        logger.warning("only %d single-operator problems available (asked %d)", len(selected), limit)
    if not selected:
        raise ValueError("no single-operator problems to embed")

    bundle.eval()
    vectors = []
    with torch.no_grad():
        for start in range(0, len(selected), batch_size):
            chunk = selected[start : start + batch_size]
            encs = [assemble_single_input(p.question, tokenizer, segment=0) for p, _ in chunk]
            _, cls_state = bundle.encode(encs)
            vectors.append(cls_state.cpu().numpy())
    matrix = np.concatenate(vectors, axis=0)
    labels = [op for _, op in selected]
    ids = [p.id for p, _ in selected]
    return matrix, labels, ids


def project_2d(matrix: np.ndarray, method: str = "tsne", seed: int = 0) -> np.ndarray:
    """Pluggable 2D projection of an embedding matrix (deterministic per seed)."""
    if matrix.ndim != 2:
        raise ValueError("expected a 2D embedding matrix")
    if method == "pca":
        from sklearn.decomposition import PCA

        return PCA(n_components=2, random_state=seed).fit_transform(matrix)
    if method == "tsne":
        from sklearn.manifold import TSNE

        perplexity = min(30.0, max(1.0, (matrix.shape[0] - 1) / 3))
        return TSNE(
            n_components=2, random_state=seed, init="pca", perplexity=perplexity
        ).fit_transform(matrix)
    raise ValueError(f"unknown projection method {method!r}")
