"""Generator of multi-step arithmetic problems in the 5-option format.

Desk-scale stand-in for the real corpus: each rationale is a chain of steps
whose left operand is the previous step's result, so swapping two steps breaks
a detectable pattern. No data files ship; callers generate what they need.
"""

from __future__ import annotations

import numpy as np

from .corpus import LABELS, Problem

_OPS = ("+", "-", "*")


def _apply(op: str, a: int, b: int) -> int:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    return a * b


def generate_problem(
    index: int,
    rng: np.random.Generator,
    min_steps: int = 2,
    max_steps: int = 4,
    answer_in_question: bool = False,
    max_value: int = 80,
) -> Problem:
    n_steps = int(rng.integers(min_steps, max_steps + 1))
    start = int(rng.integers(2, 10))
    value = start
    parts = []
    steps = []
    for _ in range(n_steps):
        x = int(rng.integers(2, 10))
        for op in rng.permutation(_OPS):
            result = _apply(op, value, x)
            if 0 <= result <= max_value:
                break
        parts.append(f"{op} {x}")
        steps.append(f"{value} {op} {x} = {result}")
        value = result
    steps.append(f"the answer is {value}")

    question = f"you start with {start} then {' then '.join(parts)} . what do you get ?"
    if answer_in_question:
        question += f" hint : the result is {value} ."

    distractors = _distractors(value, rng)
    correct_pos = int(rng.integers(5))
    values = distractors[:correct_pos] + [value] + distractors[correct_pos:]
    options = tuple(f"{LABELS[k]}){values[k]}" for k in range(5))
    return Problem(
        id=f"syn-{index:05d}",
        question=question,
        options=options,
        rationale="\n".join(steps),
        correct=LABELS[correct_pos],
    )


def _distractors(value: int, rng: np.random.Generator) -> list[int]:
    pool = []
    for delta in (1, 2, 3, 4, 5, 7, 10, 13):
        for candidate in (value + delta, value - delta):
            if candidate >= 0 and candidate != value and candidate not in pool:
                pool.append(candidate)
    picked = rng.choice(len(pool), size=4, replace=False)
    return [pool[int(i)] for i in picked]


def generate_problems(
    n: int,
    seed: int = 0,
    min_steps: int = 2,
    max_steps: int = 4,
    answer_in_question: bool = False,
) -> list[Problem]:
    rng = np.random.default_rng(seed)
    return [
        generate_problem(i, rng, min_steps, max_steps, answer_in_question) for i in range(n)
    ]
