"""Self-supervised sample construction: masked-token samples over question and
rationale spans, order-swap samples (whole-pair or neighbor variant), and the
optional question-rationale alignment samples.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Problem, split_rationale
from .tokenizer import MAX_POSITIONS, is_number_token

logger = logging.getLogger(__name__)

ROP = "ROP"
NROP = "NROP"

ORDER_PRESERVED = 0
ORDER_SWAPPED = 1

MASK_RATE = 0.15

# Stream tags keep the seeded RNG domains of masking / swapping / QRA disjoint.
_STREAM_MASK = 1
_STREAM_SWAP = 2
_STREAM_QRA = 3


@dataclass
class EncodedInput:
    """Token ids, segment ids, position ids, and attention flags for one pass.

    Layout: [CLS] question [SEP] (rationale-or-answers [SEP]); segment 0 covers
    [CLS] + question span + first [SEP], segment 1 everything after.
    """

    ids: list[int]
    segments: list[int]
    positions: list[int]
    mask: list[int]

    def __len__(self) -> int:
        return len(self.ids)

    def validate(self, max_len: int = MAX_POSITIONS) -> None:
        n = len(self.ids)
        if not (len(self.segments) == len(self.positions) == len(self.mask) == n):
            raise ValueError("encoded-input field lengths differ")
        if n > max_len:
            raise ValueError(f"encoded input of {n} tokens exceeds {max_len} positions")


@dataclass
class PretextSample:
    """An encoded input plus its masked-token targets and optional order label."""

    input: EncodedInput
    mlm_targets: dict[int, int] = field(default_factory=dict)
    order_label: int | None = None


@dataclass
class QraSample:
    """Joint question+rationale encoding with a matched/mismatched label."""

    input: EncodedInput
    matched: int


def mask_count(span_length: int) -> int:
    """Number of positions to mask in a span: round(0.15*n), minimum 1."""
    return max(1, round(MASK_RATE * span_length))


def assemble_ss_input(
    question: str,
    steps: Sequence[str],
    tokenizer,
    max_len: int | None = None,
    mask_numbers: bool = False,
) -> EncodedInput:
    """[CLS] q-tokens [SEP] r-tokens [SEP]; truncation drops rationale tail
    first, then question tail (with a warning)."""
    if not question:
        raise ValueError("question must be non-empty")
    max_len = max_len or tokenizer.max_len
    vocab = tokenizer.vocab
    q_tokens = tokenizer.tokenize(question)
    r_tokens = [t for step in steps for t in tokenizer.tokenize(step)]
    if mask_numbers:
        q_tokens = [("[NUM]" if is_number_token(t) else t) for t in q_tokens]
        r_tokens = [("[NUM]" if is_number_token(t) else t) for t in r_tokens]

    n_special = 2 + (1 if r_tokens else 0)
    overflow = len(q_tokens) + len(r_tokens) + n_special - max_len
    if overflow > 0:
        dropped_r = min(overflow, len(r_tokens))
        r_tokens = r_tokens[: len(r_tokens) - dropped_r]
        if not r_tokens:
            n_special = 2
            overflow = len(q_tokens) + n_special - max_len
        else:
            overflow = 0
        if overflow > 0:
            logger.warning("question alone exceeds %d positions; truncating question tail", max_len)
            q_tokens = q_tokens[: len(q_tokens) - overflow]

    ids = [vocab.cls_id] + [vocab.id(t) for t in q_tokens] + [vocab.sep_id]
    segments = [0] * len(ids)
    if r_tokens:
        ids += [vocab.id(t) for t in r_tokens] + [vocab.sep_id]
        segments += [1] * (len(r_tokens) + 1)
    n = len(ids)
    return EncodedInput(ids=ids, segments=segments, positions=list(range(n)), mask=[1] * n)


def _span_positions(enc: EncodedInput, segment: int, special_ids) -> list[int]:
    return [
        i
        for i, (seg, tok) in enumerate(zip(enc.segments, enc.ids))
        if seg == segment and tok not in special_ids
    ]


def apply_mlm_mask(
    enc: EncodedInput,
    vocab,
    rng: np.random.Generator,
    rate: float = MASK_RATE,
    strategy: str = "pure",
) -> PretextSample:
    """Mask round(rate*span) tokens (min 1) inside one uniformly chosen span.

    The span is the question or the rationale segment; special tokens are
    never masked; an empty chosen span falls back to the other one. The
    default strategy substitutes [MASK] everywhere; strategy="bert" restores
    the classic 80/10/10 split for ablation.
    """
    question_span = _span_positions(enc, 0, vocab.special_ids)
    rationale_span = _span_positions(enc, 1, vocab.special_ids)
    spans = [question_span, rationale_span]
    choice = int(rng.integers(2))
    span = spans[choice] or spans[1 - choice]
    if not span:
        logger.debug("no maskable positions; emitting empty-target sample")
        return PretextSample(input=enc, mlm_targets={})

    k = max(1, round(rate * len(span)))
    picked = rng.choice(len(span), size=min(k, len(span)), replace=False)
    ids = list(enc.ids)
    targets: dict[int, int] = {}
    for offset in sorted(int(i) for i in picked):
        pos = span[offset]
        targets[pos] = ids[pos]
        if strategy == "pure":
            ids[pos] = vocab.mask_id
        elif strategy == "bert":
            roll = rng.random()
            if roll < 0.8:
                ids[pos] = vocab.mask_id
            elif roll < 0.9:
                ids[pos] = int(rng.integers(len(vocab.special_ids), len(vocab)))
            # else: keep the original token
        else:
            raise ValueError(f"unknown masking strategy {strategy!r}")
    masked = EncodedInput(
        ids=ids,
        segments=list(enc.segments),
        positions=list(enc.positions),
        mask=list(enc.mask),
    )
    return PretextSample(input=masked, mlm_targets=targets)


def make_order_sample(
    steps: Sequence[str],
    variant: str,
    rng: np.random.Generator,
) -> tuple[tuple[str, ...], int] | None:
    """With p=0.5 keep the steps; otherwise swap one pair and label it.

    ROP draws i<j uniformly over all pairs; NROP draws a neighbor pair
    (j = i+1). Fewer than two steps yields None (the sample is masked-token
    only).
    """
    steps = tuple(steps)
    if len(steps) < 2:
        return None
    if rng.random() < 0.5:
        return steps, ORDER_PRESERVED
    if variant == ROP:
        pairs = list(combinations(range(len(steps)), 2))
        i, j = pairs[int(rng.integers(len(pairs)))]
    elif variant == NROP:
        i = int(rng.integers(len(steps) - 1))
        j = i + 1
    else:
        raise ValueError(f"unknown order variant {variant!r}")
    swapped = list(steps)
    swapped[i], swapped[j] = swapped[j], swapped[i]
    return tuple(swapped), ORDER_SWAPPED


def make_qra_sample(
    batch: Sequence[tuple[str, Sequence[str]]],
    tokenizer,
    rng: np.random.Generator,
    max_len: int | None = None,
) -> list[QraSample]:
    """Per batch member, substitute another member's rationale with p=0.5 and
    label the pair mismatched; every number token becomes [NUM]."""
    if len(batch) < 2:
        logger.warning("QRA batch of %d cannot form a negative; all labels matched", len(batch))
        return [
            QraSample(
                input=assemble_ss_input(q, steps, tokenizer, max_len, mask_numbers=True),
                matched=1,
            )
            for q, steps in batch
        ]
    samples = []
    for i, (question, steps) in enumerate(batch):
        matched = 1
        if rng.random() < 0.5:
            j = int(rng.integers(len(batch) - 1))
            if j >= i:
                j += 1
            steps = batch[j][1]
            matched = 0
        samples.append(
            QraSample(
                input=assemble_ss_input(question, steps, tokenizer, max_len, mask_numbers=True),
                matched=matched,
            )
        )
    return samples


def sample_rng(seed: int, epoch: int, index: int, stream: int) -> np.random.Generator:
    """Deterministic per-(seed, epoch, sample, stream) generator."""
    return np.random.default_rng([seed, epoch, index, stream])


def regenerate_epoch_samples(
    problems: Sequence[Problem],
    tokenizer,
    seed: int,
    epoch: int,
    variant: str | None = None,
    regen_every: int = 2,
    rate: float = MASK_RATE,
    strategy: str = "pure",
    use_rationales: bool = True,
    max_len: int | None = None,
) -> list[PretextSample]:
    """Build the epoch's sample set: masks are redrawn every epoch (dynamic
    masking), order-swap draws only every `regen_every` epochs."""
    swap_epoch = epoch // max(1, regen_every)
    samples = []
    for idx, problem in enumerate(problems):
        steps: tuple[str, ...] = ()
        order_label = None
        if use_rationales:
            steps = split_rationale(problem.rationale).steps
            if variant is not None:
                drawn = make_order_sample(steps, variant, sample_rng(seed, swap_epoch, idx, _STREAM_SWAP))
                if drawn is not None:
                    steps, order_label = drawn
        enc = assemble_ss_input(problem.question, steps, tokenizer, max_len)
        sample = apply_mlm_mask(
            enc, tokenizer.vocab, sample_rng(seed, epoch, idx, _STREAM_MASK), rate, strategy
        )
        sample.order_label = order_label
        samples.append(sample)
    return samples


def regenerate_qra_samples(
    problems: Sequence[Problem],
    tokenizer,
    seed: int,
    epoch: int,
    batch_size: int = 16,
    regen_every: int = 2,
    max_len: int | None = None,
) -> list[QraSample]:
    """QRA substitutions drawn over consecutive batches, refreshed on the same
    schedule as the order-swap draws."""
    swap_epoch = epoch // max(1, regen_every)
    samples: list[QraSample] = []
    for start in range(0, len(problems), batch_size):
        chunk = problems[start : start + batch_size]
        batch = [(p.question, split_rationale(p.rationale).steps) for p in chunk]
        rng = sample_rng(seed, swap_epoch, start, _STREAM_QRA)
        samples.extend(make_qra_sample(batch, tokenizer, rng, max_len))
    return samples


# --- sample cache -----------------------------------------------------------
#
# Length-prefixed binary records {ids, segments, positions, targets, label},
# keyed by (corpus hash, seed, epoch, variant).

_MAGIC = b"MPTX1\n"


def cache_filename(corpus_hash: str, seed: int, epoch: int, variant: str | None) -> str:
    return f"{corpus_hash}_s{seed}_e{epoch}_{variant or 'none'}.bin"


def write_samples(path: str | Path, samples: Sequence[PretextSample]) -> None:
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(samples)))
        for s in samples:
            payload = _pack_sample(s)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)


def read_samples(path: str | Path) -> list[PretextSample]:
    data = Path(path).read_bytes()
    if data[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path} is not a sample cache file")
    offset = len(_MAGIC)
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    samples = []
    for _ in range(count):
        (size,) = struct.unpack_from("<I", data, offset)
        offset += 4
        samples.append(_unpack_sample(data[offset : offset + size]))
        offset += size
    return samples


def _pack_sample(sample: PretextSample) -> bytes:
    enc = sample.input
    n = len(enc.ids)
    parts = [struct.pack("<H", n)]
    parts.append(struct.pack(f"<{n}I", *enc.ids))
    parts.append(struct.pack(f"<{n}B", *enc.segments))
    parts.append(struct.pack(f"<{n}H", *enc.positions))
    targets = sorted(sample.mlm_targets.items())
    parts.append(struct.pack("<H", len(targets)))
    for pos, tok in targets:
        parts.append(struct.pack("<HI", pos, tok))
    label = -1 if sample.order_label is None else sample.order_label
    parts.append(struct.pack("<b", label))
    return b"".join(parts)


def _unpack_sample(payload: bytes) -> PretextSample:
    offset = 0
    (n,) = struct.unpack_from("<H", payload, offset)
    offset += 2
    ids = list(struct.unpack_from(f"<{n}I", payload, offset))
    offset += 4 * n
    segments = list(struct.unpack_from(f"<{n}B", payload, offset))
    offset += n
    positions = list(struct.unpack_from(f"<{n}H", payload, offset))
    offset += 2 * n
    (n_targets,) = struct.unpack_from("<H", payload, offset)
    offset += 2
    targets = {}
    for _ in range(n_targets):
        pos, tok = struct.unpack_from("<HI", payload, offset)
        offset += 6
        targets[pos] = tok
    (label,) = struct.unpack_from("<b", payload, offset)
    enc = EncodedInput(ids=ids, segments=segments, positions=positions, mask=[1] * n)
    return PretextSample(input=enc, mlm_targets=targets, order_label=None if label < 0 else label)
