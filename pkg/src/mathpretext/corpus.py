"""Parse, validate, split, and subsample math word problems; dataset statistics.

Input format: JSON-lines, one object per problem with keys ``question``,
``options`` (array of 5 "X)value" strings), ``rationale``, ``correct``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LABELS = "ABCDE"
N_OPTIONS = 5

REQUIRED_KEYS = ("question", "options", "rationale", "correct")

_OPTION_RE = re.compile(r"^\s*([A-Ea-e])\s*\)\s*(.*?)\s*$", re.DOTALL)


class CorpusError(ValueError):
    """Base class for malformed problem records."""


class MissingFieldError(CorpusError):
    pass


class MalformedOptionsError(CorpusError):
    pass


class InvalidCorrectLabelError(CorpusError):
    pass


class EmptyFoldError(CorpusError):
    pass


class TokenBudgetError(CorpusError):
    pass


class OptionFormatWarning(UserWarning):
    """An option string carried no 'X)' letter prefix."""


@dataclass(frozen=True)
class Problem:
    """One record: question text, 5 lettered options, rationale, correct label."""

    id: str
    question: str
    options: tuple[str, ...]
    rationale: str
    correct: str

    @property
    def correct_index(self) -> int:
        return LABELS.index(self.correct)

    def option_values(self) -> tuple[str, ...]:
        return tuple(option_value(o) for o in self.options)


@dataclass(frozen=True)
class RationaleSteps:
    """Ordered non-empty rationale lines, source order preserved."""

    steps: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.steps)


@dataclass
class SplitSet:
    """Train/dev/ext_dev/test folds; ext_dev = seeded train sample + dev."""

    train: list[Problem]
    dev: list[Problem]
    ext_dev: list[Problem]
    test: list[Problem]
    seed: int
    sampled_ids: tuple[str, ...] = field(default_factory=tuple)

    def fold(self, name: str) -> list[Problem]:
        if name not in ("train", "dev", "ext_dev", "test"):
            raise KeyError(f"unknown fold {name!r}")
        return getattr(self, name)

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "folds": {
                name: [p.id for p in self.fold(name)]
                for name in ("train", "dev", "ext_dev", "test")
            },
        }


def parse_problem(record: Mapping, default_id: str | None = None) -> Problem:
    """Validate one key-value record into a Problem; option strings verbatim."""
    for key in REQUIRED_KEYS:
        if key not in record:
            raise MissingFieldError(f"record is missing field {key!r}")
    options = record["options"]
    if not isinstance(options, (list, tuple)) or len(options) != N_OPTIONS:
        raise MalformedOptionsError(
            f"expected {N_OPTIONS} options, got {len(options) if isinstance(options, (list, tuple)) else type(options).__name__}"
        )
    for i, option in enumerate(options):
        m = _OPTION_RE.match(str(option))
        if m is None or m.group(1).upper() != LABELS[i]:
            raise MalformedOptionsError(
                f"option {i} must carry prefix '{LABELS[i]})', got {option!r}"
            )
    correct = str(record["correct"]).strip().upper()
    if correct not in LABELS:
        raise InvalidCorrectLabelError(f"correct label must be one of A..E, got {record['correct']!r}")
    problem_id = str(record.get("id") or default_id or _content_id(record))
    return Problem(
        id=problem_id,
        question=str(record["question"]),
        options=tuple(str(o) for o in options),
        rationale=str(record["rationale"]),
        correct=correct,
    )


def _content_id(record: Mapping) -> str:
    payload = json.dumps(
        [record["question"], list(record["options"]), record["correct"]],
        ensure_ascii=False,
    )
    return hashlib.sha1(payload.encode("utf-8")).hexdigest()[:12]


def split_rationale(rationale: str) -> RationaleSteps:
    """Split on line boundaries, drop blank lines, trim each step."""
    steps = tuple(line.strip() for line in rationale.splitlines() if line.strip())
    return RationaleSteps(steps)


def option_value(option: str) -> str:
    """Strip the 'X)' letter prefix from an option string.

    Options without a prefix are returned unchanged with an
    OptionFormatWarning so SEP heads never see position markers silently.
    """
    m = _OPTION_RE.match(option)
    if m is None:
        warnings.warn(f"option {option!r} has no letter prefix", OptionFormatWarning, stacklevel=2)
        return option
    return m.group(2)


def load_fold(path: str | Path, fold_name: str | None = None) -> list[Problem]:
    """Read one JSON-lines fold; ids become '<fold>-<index>' when absent."""
    path = Path(path)
    prefix = fold_name or path.stem
    problems = []
    with path.open(encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            problems.append(parse_problem(json.loads(line), default_id=f"{prefix}-{i:06d}"))
    return problems


def load_dataset(data_dir: str | Path) -> dict[str, list[Problem]]:
    """Load train/dev/test folds from a directory of .json/.jsonl files."""
    data_dir = Path(data_dir)
    folds = {}
    for name in ("train", "dev", "test"):
        for suffix in (".json", ".jsonl"):
            path = data_dir / f"{name}{suffix}"
            if path.exists():
                folds[name] = load_fold(path, name)
                break
        else:
            raise FileNotFoundError(f"no {name}.json(l) under {data_dir}")
    return folds


def save_fold(problems: Sequence[Problem], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for p in problems:
            fh.write(
                json.dumps(
                    {
                        "id": p.id,
                        "question": p.question,
                        "options": list(p.options),
                        "rationale": p.rationale,
                        "correct": p.correct,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def save_splits(splits: SplitSet, out_dir: str | Path) -> None:
    """Write the four folds plus the splits.json manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in ("train", "dev", "ext_dev", "test"):
        save_fold(splits.fold(name), out_dir / f"{name}.jsonl")
    (out_dir / "splits.json").write_text(
        json.dumps(splits.manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def build_splits(
    train: Sequence[Problem],
    dev: Sequence[Problem],
    test: Sequence[Problem],
    seed: int,
    ext_dev_size: int = 5000,
    keep_in_train: bool = False,
) -> SplitSet:
    """Build the extended dev fold: `ext_dev_size` seeded train samples + dev.

    The sampled problems are removed from the effective train fold unless
    `keep_in_train` is set.
    """
    rng = np.random.default_rng(seed)
    if len(train) < ext_dev_size:
        logger.warning(
            "train fold has %d problems (< %d); sampling all of it into ext_dev",
            len(train),
            ext_dev_size,
        )
        ext_dev_size = len(train)
    picked = rng.choice(len(train), size=ext_dev_size, replace=False)
    picked_set = set(picked.tolist())
    sampled = [train[i] for i in sorted(picked_set)]
    effective_train = (
        list(train) if keep_in_train else [p for i, p in enumerate(train) if i not in picked_set]
    )
    return SplitSet(
        train=effective_train,
        dev=list(dev),
        ext_dev=sampled + list(dev),
        test=list(test),
        seed=seed,
        sampled_ids=tuple(p.id for p in sampled),
    )


def answer_distribution(fold: Sequence[Problem]) -> dict[str, float]:
    """Percentage of each correct label over the fold."""
    if not fold:
        raise EmptyFoldError("cannot compute answer distribution of an empty fold")
    counts = {label: 0 for label in LABELS}
    for p in fold:
        counts[p.correct] += 1
    return {label: 100.0 * counts[label] / len(fold) for label in LABELS}


def corpus_fingerprint(problems: Sequence[Problem]) -> str:
    """Stable hash of a problem list, used as a sample-cache key component."""
    h = hashlib.sha1()
    for p in problems:
        h.update(p.id.encode("utf-8"))
        h.update(p.question.encode("utf-8"))
        h.update(p.rationale.encode("utf-8"))
        h.update(p.correct.encode("utf-8"))
    return h.hexdigest()[:16]


def token_counts(problems: Sequence[Problem], tokenizer) -> tuple[np.ndarray, np.ndarray]:
    """Per-problem question and rationale token counts."""
    q = np.array([len(tokenizer.tokenize(p.question)) for p in problems], dtype=np.int64)
    r = np.array([len(tokenizer.tokenize(p.rationale)) for p in problems], dtype=np.int64)
    return q, r


def rationale_question_token_ratio(problems: Sequence[Problem], tokenizer) -> float:
    """Total rationale tokens / total question tokens (paper-reported ~1.7)."""
    q, r = token_counts(problems, tokenizer)
    if q.sum() == 0:
        raise EmptyFoldError("fold has no question tokens")
    return float(r.sum() / q.sum())


@dataclass
class TokenMatchedPair:
    """A questions-only and a questions+rationales subset of matched budget."""

    fraction: float
    budget: int
    questions_subset: list[Problem]
    joint_subset: list[Problem]
    question_tokens: int
    joint_tokens: int

    @property
    def mismatch(self) -> float:
        return abs(self.question_tokens - self.joint_tokens) / max(self.question_tokens, 1)


def token_matched_subsets(
    train: Sequence[Problem],
    tokenizer,
    question_fractions: Sequence[float],
    tolerance: float = 0.02,
    rng: np.random.Generator | None = None,
) -> list[TokenMatchedPair]:
    """For each fraction of question tokens, pair a questions-only subset with
    a questions+rationales subset whose token totals match within `tolerance`.

    Subsets are prefixes of a (optionally shuffled) problem order, cut at the
    prefix whose cumulative token count is closest to the budget.
    """
    problems = list(train)
    if rng is not None:
        order = rng.permutation(len(problems))
        problems = [problems[i] for i in order]
    q_counts, r_counts = token_counts(problems, tokenizer)
    joint_counts = q_counts + r_counts
    q_cum = np.cumsum(q_counts)
    joint_cum = np.cumsum(joint_counts)
    total_q = int(q_cum[-1]) if len(q_cum) else 0

    pairs = []
    for fraction in question_fractions:
        if not 0 < fraction <= 1:
            raise TokenBudgetError(f"question fraction must lie in (0, 1], got {fraction}")
        budget = int(round(fraction * total_q))
        if budget > total_q:
            raise TokenBudgetError(f"budget {budget} exceeds corpus size {total_q}")
        n_q = _closest_prefix(q_cum, budget)
        n_joint = _closest_prefix(joint_cum, budget)
        pair = TokenMatchedPair(
            fraction=fraction,
            budget=budget,
            questions_subset=problems[:n_q],
            joint_subset=problems[:n_joint],
            question_tokens=int(q_cum[n_q - 1]) if n_q else 0,
            joint_tokens=int(joint_cum[n_joint - 1]) if n_joint else 0,
        )
        if pair.mismatch > tolerance:
            logger.warning(
                "token budgets differ by %.1f%% at fraction %.3f (corpus too small/coarse)",
                100 * pair.mismatch,
                fraction,
            )
        pairs.append(pair)
    return pairs


def _closest_prefix(cumulative: np.ndarray, budget: int) -> int:
    """Length of the prefix whose cumulative sum is closest to budget (>=1)."""
    if len(cumulative) == 0:
        raise TokenBudgetError("empty corpus")
    idx = int(np.searchsorted(cumulative, budget))
    candidates = [i for i in (idx, idx + 1) if 1 <= i <= len(cumulative)]
    if not candidates:
        candidates = [1]
    return min(candidates, key=lambda i: abs(int(cumulative[i - 1]) - budget))
