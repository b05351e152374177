"""Two-phase training orchestration: self-supervision on question/rationale
samples, then fine-tuning on the answer task with early stopping.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .answer_scoring import (
    SCHEME_AUG,
    SCHEME_ORIG,
    SCHEME_SEP_NC,
    SCHEMES,
    assemble_qa_input,
    assemble_sep_c_input,
    assemble_single_input,
    augment_permutations,
    score_problems,
)
from .corpus import Problem, corpus_fingerprint
from .encoder import (
    HEAD_MLM,
    HEAD_ORDER,
    HEAD_QRA,
    ModelBundle,
    batch_inputs,
    save_checkpoint,
)
from .pretext import (
    NROP,
    ROP,
    PretextSample,
    cache_filename,
    read_samples,
    regenerate_epoch_samples,
    regenerate_qra_samples,
    write_samples,
)

CACHE_ENV = "MATHPRETEXT_CACHE"

logger = logging.getLogger(__name__)

LOSS_MLM = "MLM"
LOSS_ROP = "ROP"
LOSS_NROP = "NROP"
LOSS_QRA = "QRA"
LOSSES = (LOSS_MLM, LOSS_ROP, LOSS_NROP, LOSS_QRA)

PHASE_SELFSUP = "selfsup"
PHASE_FINETUNE = "finetune"


class TrainingDivergedError(RuntimeError):
    """A non-finite loss was encountered; a diagnostic snapshot was written."""


@dataclass
class TrainConfig:
    """Schedules for both phases; unset fields resolve to the phase defaults
    (selfsup: lr 5e-5, 24 epochs, batch 16; finetune: lr 1e-5, grad clip 1.0,
    patience 15)."""

    phase: str = PHASE_SELFSUP
    losses: tuple[str, ...] = (LOSS_MLM,)
    scheme: str = SCHEME_ORIG
    lr: float | None = None
    epochs: int | None = None
    batch_size: int = 16
    micro_batch: int | None = None
    grad_clip: float | None = None
    patience: int | None = None
    seed: int = 0
    regen_every: int = 2
    use_rationales: bool = True
    mask_rate: float = 0.15
    mask_strategy: str = "pure"
    loss_weights: dict = field(default_factory=dict)
    aug_permutations: int = 25
    val_split: str = "dev"
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.phase not in (PHASE_SELFSUP, PHASE_FINETUNE):
            raise ValueError(f"unknown phase {self.phase!r}")
        unknown = set(self.losses) - set(LOSSES)
        if unknown:
            raise ValueError(f"unknown losses: {sorted(unknown)}")
        if LOSS_ROP in self.losses and LOSS_NROP in self.losses:
            raise ValueError("ROP and NROP are mutually exclusive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.lr is None:
            self.lr = 5e-5 if self.phase == PHASE_SELFSUP else 1e-5
        if self.epochs is None:
            self.epochs = 24 if self.phase == PHASE_SELFSUP else 100
        if self.phase == PHASE_FINETUNE:
            if self.grad_clip is None:
                self.grad_clip = 1.0
            if self.patience is None:
                self.patience = 15
        if self.micro_batch is None:
            self.micro_batch = self.batch_size
        if self.batch_size % self.micro_batch != 0:
            raise ValueError("batch_size must be a multiple of micro_batch")

    @property
    def order_variant(self) -> str | None:
        if LOSS_ROP in self.losses:
            return ROP
        if LOSS_NROP in self.losses:
            return NROP
        return None

    def weight(self, loss: str) -> float:
        return float(self.loss_weights.get(loss, 1.0))


class EarlyStopper:
    """Best-value tracking that stops after `patience` consecutive epochs
    without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch: int | None = None
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    history: list[dict]
    checkpoint_dir: Path | None = None

    def epoch_losses(self, term: str = "loss") -> list[float]:
        return [row[term] for row in self.history if term in row]


@dataclass
class FinetuneResult:
    bundle: ModelBundle
    history: list[dict]
    best_epoch: int
    best_val_acc: float
    checkpoint_dir: Path | None = None


def _append_metrics(out_dir: Path | None, row: dict) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "metrics.jsonl").open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(row, sort_keys=True) + "\n")


def _nan_snapshot(bundle: ModelBundle, out_dir: Path | None, info: dict) -> None:
    if out_dir is None:
        return
    snap = out_dir / "nan_snapshot"
    save_checkpoint(bundle, snap)
    (snap / "diagnostic.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def _order_batch(samples: Sequence[PretextSample]) -> tuple[list[int], list[int]]:
    idx = [i for i, s in enumerate(samples) if s.order_label is not None]
    labels = [samples[i].order_label for i in idx]
    return idx, labels


def self_supervised_train(
    bundle: ModelBundle,
    problems: Sequence[Problem],
    tokenizer,
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Minimize the sum of the enabled pretext losses with Adam; samples are
    refreshed per the dynamic-masking / k-epoch swap schedule."""
    if config.phase != PHASE_SELFSUP:
        config = replace(config, phase=PHASE_SELFSUP)
    out_dir = Path(out_dir) if out_dir is not None else None
    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(bundle.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    max_len = min(tokenizer.max_len, bundle.config.max_positions)
    accum = config.batch_size // config.micro_batch
    history = []
    checkpoint_dir = None

    cache_dir = os.environ.get(CACHE_ENV)
    corpus_hash = corpus_fingerprint(problems) if cache_dir else None

    for epoch in range(config.epochs):
        bundle.train()
        samples = _epoch_samples(
            problems, tokenizer, config, epoch, max_len, cache_dir, corpus_hash
        )
        qra_samples = []
        if LOSS_QRA in config.losses:
            qra_samples = regenerate_qra_samples(
                problems,
                tokenizer,
                seed=config.seed,
                epoch=epoch,
                batch_size=config.batch_size,
                regen_every=config.regen_every,
                max_len=max_len,
            )
        order = np.random.default_rng([config.seed, epoch, 4]).permutation(len(samples))

        step_losses: dict[str, list[float]] = {"loss": [], LOSS_MLM: [], "ORDER": [], LOSS_QRA: []}
        optimizer.zero_grad()
        micro_steps = 0
        for start in range(0, len(order), config.micro_batch):
            chunk = [samples[i] for i in order[start : start + config.micro_batch]]
            losses = {}
            batch = batch_inputs([s.input for s in chunk], device=bundle.device)
            states, cls_state = bundle.forward_states(batch)
            if LOSS_MLM in config.losses:
                losses[LOSS_MLM] = bundle.mlm_loss(states, [s.mlm_targets for s in chunk])
            if config.order_variant is not None:
                idx, labels = _order_batch(chunk)
                if idx:
                    losses["ORDER"] = bundle.order_loss(
                        cls_state[idx], torch.tensor(labels, device=bundle.device)
                    )
            if qra_samples:
                qra_chunk = [qra_samples[i] for i in order[start : start + config.micro_batch]]
                qbatch = batch_inputs([s.input for s in qra_chunk], device=bundle.device)
                _, qra_cls = bundle.forward_states(qbatch)
                losses[LOSS_QRA] = bundle.qra_loss(
                    qra_cls, torch.tensor([s.matched for s in qra_chunk], device=bundle.device)
                )
            if not losses:
                raise ValueError("no enabled loss produced a term; check config.losses")
            order_weight = config.weight(config.order_variant) if config.order_variant else 1.0
            total = sum(
                (order_weight if name == "ORDER" else config.weight(name)) * term
                for name, term in losses.items()
            )
            if not torch.isfinite(total):
                _nan_snapshot(bundle, out_dir, {"epoch": epoch, "step_start": int(start)})
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            (total / accum).backward()
            micro_steps += 1
            if micro_steps % accum == 0:
                if config.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(bundle.parameters(), config.grad_clip)
                optimizer.step()
                optimizer.zero_grad()
            step_losses["loss"].append(float(total.detach()))
            for name, term in losses.items():
                step_losses[name].append(float(term.detach()))
        if micro_steps % accum != 0:
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(bundle.parameters(), config.grad_clip)
            optimizer.step()
            optimizer.zero_grad()

        row = {"epoch": epoch, "lr": config.lr, "loss": float(np.mean(step_losses["loss"]))}
        if step_losses[LOSS_MLM]:
            row["loss_mlm"] = float(np.mean(step_losses[LOSS_MLM]))
        if step_losses["ORDER"]:
            row["loss_order"] = float(np.mean(step_losses["ORDER"]))
        if step_losses[LOSS_QRA]:
            row["loss_qra"] = float(np.mean(step_losses[LOSS_QRA]))
        history.append(row)
        _append_metrics(out_dir, row)
        logger.info("selfsup epoch %d: %s", epoch, row)
        if out_dir is not None and (epoch + 1) % config.checkpoint_every == 0:
            checkpoint_dir = save_checkpoint(bundle, out_dir / f"epoch-{epoch:03d}")

    if out_dir is not None:
        checkpoint_dir = save_checkpoint(bundle, out_dir / "final")
    return TrainResult(history=history, checkpoint_dir=checkpoint_dir)


def _epoch_samples(
    problems, tokenizer, config: TrainConfig, epoch: int, max_len: int, cache_dir, corpus_hash
) -> list[PretextSample]:
    """Regenerate the epoch's samples, going through the on-disk cache when a
    cache directory is configured; cached samples equal regenerated ones by
    the determinism of (seed, epoch)."""
    cache_path = None
    if cache_dir is not None:
        name = cache_filename(
            f"{corpus_hash}_{config.mask_strategy}_r{int(config.use_rationales)}",
            config.seed,
            epoch,
            config.order_variant,
        )
        cache_path = Path(cache_dir) / name
        if cache_path.exists():
            logger.debug("reading epoch %d samples from %s", epoch, cache_path)
            return read_samples(cache_path)
    samples = regenerate_epoch_samples(
        problems,
        tokenizer,
        seed=config.seed,
        epoch=epoch,
        variant=config.order_variant,
        regen_every=config.regen_every,
        rate=config.mask_rate,
        strategy=config.mask_strategy,
        use_rationales=config.use_rationales,
        max_len=max_len,
    )
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        write_samples(cache_path, samples)
    return samples


def order_prediction_accuracy(
    bundle: ModelBundle,
    problems: Sequence[Problem],
    tokenizer,
    config: TrainConfig,
    epoch: int = 0,
    batch_size: int = 32,
) -> float:
    """Swap-detection accuracy of the order head on freshly drawn samples."""
    variant = config.order_variant
    if variant is None:
        raise ValueError("config enables no order loss")
    samples = regenerate_epoch_samples(
        problems,
        tokenizer,
        seed=config.seed + 1,
        epoch=epoch,
        variant=variant,
        regen_every=config.regen_every,
        max_len=min(tokenizer.max_len, bundle.config.max_positions),
    )
    samples = [s for s in samples if s.order_label is not None]
    if not samples:
        raise ValueError("no problems with >=2 rationale steps")
    bundle.eval()
    hits = 0
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            batch = batch_inputs([s.input for s in chunk], device=bundle.device)
            _, cls_state = bundle.forward_states(batch)
            pred = (bundle.order_logits(cls_state) > 0).long().cpu().numpy()
            hits += int((pred == np.array([s.order_label for s in chunk])).sum())
    return hits / len(samples)


# --- fine-tuning ---------------------------------------------------------------


def _finetune_step_inputs(problems, scheme, tokenizer, epoch, config):
    """Per-epoch training examples for the scheme.

    ORIG uses the source ordering; AUG replaces each problem by sampled
    permutations refreshed on the swap schedule; SEP schemes enumerate all
    five (question, candidate) pairs (1 positive, 4 negatives).
    """
    if scheme == SCHEME_AUG:
        regen = epoch // max(1, config.regen_every)
        out = []
        for idx, p in enumerate(problems):
            rng = np.random.default_rng([config.seed, regen, idx, 5])
            out.extend(augment_permutations(p, rng, n=config.aug_permutations))
        return out
    return list(problems)


def finetune(
    bundle: ModelBundle,
    train_problems: Sequence[Problem],
    val_problems: Sequence[Problem],
    tokenizer,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    test_problems: Sequence[Problem] | None = None,
) -> FinetuneResult:
    """Fine-tune on the answer task; self-supervised heads are discarded and
    the best-validation-epoch checkpoint is returned (early stopping)."""
    if config.phase != PHASE_FINETUNE:
        config = replace(config, phase=PHASE_FINETUNE)
    if not val_problems:
        raise ValueError("validation set is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    scheme = config.scheme
    model = bundle.for_finetuning(scheme) if _has_ss_heads(bundle) else bundle
    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    stopper = EarlyStopper(config.patience)
    accum = config.batch_size // config.micro_batch
    max_len = min(tokenizer.max_len, model.config.max_positions)
    history = []
    best_state = None

    for epoch in range(config.epochs):
        model.train()
        examples = _finetune_step_inputs(train_problems, scheme, tokenizer, epoch, config)
        order = np.random.default_rng([config.seed, epoch, 6]).permutation(len(examples))
        step_losses = []
        optimizer.zero_grad()
        micro_steps = 0
        micro = max(1, config.micro_batch // 5) if scheme.startswith("SEP") else config.micro_batch
        for start in range(0, len(order), micro):
            chunk = [examples[i] for i in order[start : start + micro]]
            loss = _finetune_loss(model, chunk, scheme, tokenizer, max_len)
            if not torch.isfinite(loss):
                _nan_snapshot(model, out_dir, {"epoch": epoch, "step_start": int(start)})
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            (loss / accum).backward()
            micro_steps += 1
            if micro_steps % accum == 0:
                if config.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                optimizer.zero_grad()
            step_losses.append(float(loss.detach()))
        if micro_steps % accum != 0:
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            optimizer.zero_grad()

        val_acc = accuracy_of(model, val_problems, scheme, tokenizer)
        row = {
            "epoch": epoch,
            "lr": config.lr,
            "loss": float(np.mean(step_losses)) if step_losses else 0.0,
            "val_acc": val_acc,
        }
        if test_problems is not None:
            row["test_acc"] = accuracy_of(model, test_problems, scheme, tokenizer)
        history.append(row)
        _append_metrics(out_dir, row)
        logger.info("finetune epoch %d: %s", epoch, row)

        if val_acc > stopper.best:
            best_state = copy.deepcopy(model.state_dict())
        if stopper.update(epoch, val_acc):
            logger.info("early stopping at epoch %d (best %d)", epoch, stopper.best_epoch)
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    checkpoint_dir = save_checkpoint(model, Path(out_dir) / "best") if out_dir else None
    return FinetuneResult(
        bundle=model,
        history=history,
        best_epoch=stopper.best_epoch if stopper.best_epoch is not None else 0,
        best_val_acc=stopper.best,
        checkpoint_dir=checkpoint_dir,
    )


def _has_ss_heads(bundle: ModelBundle) -> bool:
    return any(h in bundle.head_names for h in (HEAD_MLM, HEAD_ORDER, HEAD_QRA))


def _finetune_loss(model, chunk, scheme, tokenizer, max_len):
    device = model.device
    if scheme in (SCHEME_ORIG, SCHEME_AUG):
        encs = [assemble_qa_input(p.question, p.option_values(), tokenizer, max_len) for p in chunk]
        _, cls_state = model.forward_states(batch_inputs(encs, device=device))
        labels = torch.tensor([p.correct_index for p in chunk], device=device)
        return torch.nn.functional.cross_entropy(model.qa_logits(cls_state), labels)
    lefts, rights, labels = [], [], []
    for p in chunk:
        values = p.option_values()
        if scheme == SCHEME_SEP_NC:
            left = assemble_single_input(p.question, tokenizer, segment=0, max_len=max_len)
        else:
            left = assemble_sep_c_input(p.question, values, tokenizer, max_len)
        for i, value in enumerate(values):
            lefts.append(left)
            rights.append(assemble_single_input(value, tokenizer, segment=1, max_len=max_len))
            labels.append(1.0 if i == p.correct_index else 0.0)
    _, cls_left = model.forward_states(batch_inputs(lefts, device=device))
    _, cls_right = model.forward_states(batch_inputs(rights, device=device))
    logits = model.match_logit(cls_left, cls_right)
    return torch.nn.functional.binary_cross_entropy_with_logits(
        logits, torch.tensor(labels, device=device)
    )


def accuracy_of(model: ModelBundle, problems: Sequence[Problem], scheme: str, tokenizer) -> float:
    """Fraction of problems whose argmax choice equals the correct label."""
    if not problems:
        raise ValueError("empty evaluation fold")
    scored = score_problems(model, problems, scheme, tokenizer)
    hits = sum(1 for p, s in zip(problems, scored) if s.chosen == p.correct_index)
    return hits / len(problems)
