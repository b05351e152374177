"""Transformer encoder with token/segment/position embeddings and the task
heads: masked-token vocabulary prediction, binary order prediction, 5-way QA
classification, and the two-layer binary match head used by the SEP schemes.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .pretext import EncodedInput

logger = logging.getLogger(__name__)

NEG_INF = -1e9

HEAD_MLM = "mlm"
HEAD_ORDER = "order"
HEAD_QA = "qa"
HEAD_MATCH = "match"
HEAD_QRA = "qra"

SELF_SUPERVISED_HEADS = (HEAD_MLM, HEAD_ORDER, HEAD_QRA)
ALL_HEADS = (HEAD_MLM, HEAD_ORDER, HEAD_QA, HEAD_MATCH, HEAD_QRA)


class EncoderOverflowError(ValueError):
    """Input longer than the positional table."""


@dataclass
class EncoderConfig:
    layers: int
    heads: int
    hidden: int
    ffn: int
    vocab_size: int
    max_positions: int = 512
    segments: int = 2
    dropout: float = 0.1
    match_activation: str = "gelu"

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden dim {self.hidden} not divisible by {self.heads} heads")

    @classmethod
    def toy(cls, vocab_size: int, **overrides) -> "EncoderConfig":
        params = dict(layers=4, heads=4, hidden=128, ffn=512, vocab_size=vocab_size)
        params.update(overrides)
        return cls(**params)

    @classmethod
    def base(cls, vocab_size: int, **overrides) -> "EncoderConfig":
        params = dict(layers=12, heads=12, hidden=768, ffn=3072, vocab_size=vocab_size)
        params.update(overrides)
        return cls(**params)


def preset_config(name: str, vocab_size: int, **overrides) -> EncoderConfig:
    if name == "toy":
        return EncoderConfig.toy(vocab_size, **overrides)
    if name == "base":
        return EncoderConfig.base(vocab_size, **overrides)
    raise ValueError(f"unknown preset {name!r}")


def _activation(name: str):
    table = {"gelu": F.gelu, "relu": F.relu, "tanh": torch.tanh}
    if name not in table:
        raise ValueError(f"unknown activation {name!r}")
    return table[name]


class SelfAttention(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.n_heads = config.heads
        self.head_dim = config.hidden // config.heads
        self.query = nn.Linear(config.hidden, config.hidden)
        self.key = nn.Linear(config.hidden, config.hidden)
        self.value = nn.Linear(config.hidden, config.hidden)
        self.out = nn.Linear(config.hidden, config.hidden)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor, attn_bias: torch.Tensor) -> torch.Tensor:
        b, n, h = x.shape

        def split(t):
            return t.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim) + attn_bias
        probs = self.dropout(torch.softmax(scores, dim=-1))
        ctx = (probs @ v).transpose(1, 2).reshape(b, n, h)
        return self.out(ctx)


class EncoderLayer(nn.Module):
    """Post-layer-norm block: LN(x + attn(x)), LN(x + ffn(x))."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.attn = SelfAttention(config)
        self.attn_norm = nn.LayerNorm(config.hidden)
        self.ffn_in = nn.Linear(config.hidden, config.ffn)
        self.ffn_out = nn.Linear(config.ffn, config.hidden)
        self.ffn_norm = nn.LayerNorm(config.hidden)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor, attn_bias: torch.Tensor) -> torch.Tensor:
        x = self.attn_norm(x + self.dropout(self.attn(x, attn_bias)))
        x = self.ffn_norm(x + self.dropout(self.ffn_out(F.gelu(self.ffn_in(x)))))
        return x


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.hidden)
        self.segment_embedding = nn.Embedding(config.segments, config.hidden)
        self.position_embedding = nn.Embedding(config.max_positions, config.hidden)
        self.norm = nn.LayerNorm(config.hidden)
        self.dropout = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.layers))

    def forward(
        self,
        ids: torch.Tensor,
        segments: torch.Tensor,
        positions: torch.Tensor,
        mask: torch.Tensor,
    ) -> torch.Tensor:
        if ids.shape[-1] > self.config.max_positions:
            raise EncoderOverflowError(
                f"sequence of {ids.shape[-1]} exceeds {self.config.max_positions} positions"
            )
        x = (
            self.token_embedding(ids)
            + self.segment_embedding(segments)
            + self.position_embedding(positions)
        )
        x = self.dropout(self.norm(x))
        # Additive key mask: padded positions contribute exactly zero attention.
        attn_bias = (1.0 - mask.to(x.dtype))[:, None, None, :] * NEG_INF
        for layer in self.layers:
            x = layer(x, attn_bias)
        return x


class MlmHead(nn.Module):
    """Per-position transform + decoder over the vocabulary."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.transform = nn.Linear(config.hidden, config.hidden)
        self.norm = nn.LayerNorm(config.hidden)
        self.decoder = nn.Linear(config.hidden, config.vocab_size)

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.norm(F.gelu(self.transform(states))))


class MatchHead(nn.Module):
    """Two-layer perceptron on two concatenated [CLS] embeddings."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.hidden = nn.Linear(2 * config.hidden, config.hidden)
        self.out = nn.Linear(config.hidden, 1)
        self.act = _activation(config.match_activation)

    def forward(self, cls_a: torch.Tensor, cls_b: torch.Tensor) -> torch.Tensor:
        return self.out(self.act(self.hidden(torch.cat([cls_a, cls_b], dim=-1)))).squeeze(-1)


class ModelBundle(nn.Module):
    """Encoder trunk plus whichever heads the phase needs.

    All heads read the [CLS] state except the masked-token head, which reads
    per-position states. Fine-tuning swaps the self-supervised heads for the
    task head while the trunk keeps its parameters.
    """

    def __init__(self, config: EncoderConfig, heads: Sequence[str] = (HEAD_MLM, HEAD_ORDER)):
        super().__init__()
        unknown = set(heads) - set(ALL_HEADS)
        if unknown:
            raise ValueError(f"unknown heads: {sorted(unknown)}")
        self.config = config
        self.encoder = Encoder(config)
        modules = {}
        for head in heads:
            if head == HEAD_MLM:
                modules[head] = MlmHead(config)
            elif head == HEAD_MATCH:
                modules[head] = MatchHead(config)
            elif head == HEAD_QA:
                modules[head] = nn.Linear(config.hidden, 5)
            else:  # order / qra: binary logit on [CLS]
                modules[head] = nn.Linear(config.hidden, 1)
        self.heads = nn.ModuleDict(modules)
        self.apply(_init_weights)

    @property
    def head_names(self) -> tuple[str, ...]:
        return tuple(self.heads.keys())

    def trunk_parameter_count(self) -> int:
        return sum(p.numel() for p in self.encoder.parameters())

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward_states(self, batch: dict[str, torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        states = self.encoder(batch["ids"], batch["segments"], batch["positions"], batch["mask"])
        return states, states[:, 0]

    def encode(self, inputs: "EncodedInput | Sequence[EncodedInput]") -> tuple[torch.Tensor, torch.Tensor]:
        """Per-position states and the [CLS] state for one or more inputs."""
        single = isinstance(inputs, EncodedInput)
        batch = batch_inputs([inputs] if single else list(inputs), device=self.device)
        states, cls_state = self.forward_states(batch)
        if single:
            return states[0], cls_state[0]
        return states, cls_state

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    # --- losses and head outputs -------------------------------------------

    def mlm_loss(self, states: torch.Tensor, targets: Sequence[dict[int, int]]) -> torch.Tensor:
        """Mean cross-entropy over masked positions only."""
        rows, cols, ids = [], [], []
        for b, t in enumerate(targets):
            for pos, tok in t.items():
                rows.append(b)
                cols.append(pos)
                ids.append(tok)
        if not rows:
            logger.debug("mlm_loss called with no masked positions; contributing 0")
            return states.sum() * 0.0
        logits = self.heads[HEAD_MLM](states[rows, cols])
        return F.cross_entropy(logits, torch.tensor(ids, dtype=torch.long, device=states.device))

    def order_logits(self, cls_state: torch.Tensor) -> torch.Tensor:
        return self.heads[HEAD_ORDER](cls_state).squeeze(-1)

    def order_loss(self, cls_state: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Binary cross-entropy of the order head on [CLS]."""
        return F.binary_cross_entropy_with_logits(
            self.order_logits(cls_state), labels.to(cls_state.dtype)
        )

    def qra_logits(self, cls_state: torch.Tensor) -> torch.Tensor:
        return self.heads[HEAD_QRA](cls_state).squeeze(-1)

    def qra_loss(self, cls_state: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return F.binary_cross_entropy_with_logits(
            self.qra_logits(cls_state), labels.to(cls_state.dtype)
        )

    def qa_logits(self, cls_state: torch.Tensor) -> torch.Tensor:
        return self.heads[HEAD_QA](cls_state)

    def qa_forward(self, cls_state: torch.Tensor) -> torch.Tensor:
        """5-way answer probabilities (softmax over the QA head)."""
        return torch.softmax(self.qa_logits(cls_state), dim=-1)

    def match_logit(self, cls_a: torch.Tensor, cls_b: torch.Tensor) -> torch.Tensor:
        return self.heads[HEAD_MATCH](cls_a, cls_b)

    def match_score(self, cls_a: torch.Tensor, cls_b: torch.Tensor) -> torch.Tensor:
        """Probability in [0,1] that the two encodings belong together."""
        return torch.sigmoid(self.match_logit(cls_a, cls_b))

    # --- phase transitions ---------------------------------------------------

    def for_finetuning(self, scheme: str) -> "ModelBundle":
        """Copy of the trunk with the scheme's task head only; self-supervised
        heads are discarded."""
        head = HEAD_MATCH if scheme.upper().startswith("SEP") else HEAD_QA
        bundle = ModelBundle(self.config, heads=(head,))
        bundle.encoder.load_state_dict(self.encoder.state_dict())
        return bundle


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Linear, nn.Embedding)):
        nn.init.trunc_normal_(module.weight, std=0.02, a=-0.04, b=0.04)
        if isinstance(module, nn.Linear) and module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def batch_inputs(
    inputs: Sequence[EncodedInput],
    device: torch.device | str | None = None,
    pad_id: int = 0,
) -> dict[str, torch.Tensor]:
    """Pad encoded inputs to a rectangular batch; padded slots get mask 0."""
    n = max(len(e) for e in inputs)

    def pad(values, fill):
        return [list(v) + [fill] * (n - len(v)) for v in values]

    batch = {
        "ids": torch.tensor(pad([e.ids for e in inputs], pad_id), dtype=torch.long),
        "segments": torch.tensor(pad([e.segments for e in inputs], 0), dtype=torch.long),
        "positions": torch.tensor(pad([e.positions for e in inputs], 0), dtype=torch.long),
        "mask": torch.tensor(pad([e.mask for e in inputs], 0), dtype=torch.long),
    }
    if device is not None:
        batch = {k: v.to(device) for k, v in batch.items()}
    return batch


# --- checkpoints -------------------------------------------------------------
#
# A checkpoint is a directory: config.json + params/<name>.npy per parameter.
# An optional name_map.json (external name -> internal name) lets externally
# pretrained weights load into the trunk.


def save_checkpoint(bundle: ModelBundle, directory: str | Path) -> Path:
    directory = Path(directory)
    params_dir = directory / "params"
    params_dir.mkdir(parents=True, exist_ok=True)
    meta = {"config": asdict(bundle.config), "heads": list(bundle.head_names)}
    (directory / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for name, tensor in bundle.state_dict().items():
        np.save(params_dir / f"{name}.npy", tensor.detach().cpu().numpy())
    return directory


def load_checkpoint(directory: str | Path) -> ModelBundle:
    directory = Path(directory)
    meta = json.loads((directory / "config.json").read_text())
    bundle = ModelBundle(EncoderConfig(**meta["config"]), heads=meta["heads"])
    name_map = {}
    map_path = directory / "name_map.json"
    if map_path.exists():
        name_map = json.loads(map_path.read_text())
    state = {}
    for path in sorted((directory / "params").glob("*.npy")):
        name = path.name[: -len(".npy")]
        state[name_map.get(name, name)] = torch.from_numpy(np.load(path))
    bundle.load_state_dict(state)
    return bundle


def load_pretrained_trunk(bundle: ModelBundle, directory: str | Path) -> list[str]:
    """Load externally named trunk weights via the checkpoint's name_map.json.

    Returns the internal parameter names that were filled; heads and unmapped
    parameters keep their fresh initialization.
    """
    directory = Path(directory)
    name_map = json.loads((directory / "name_map.json").read_text())
    state = bundle.state_dict()
    filled = []
    for external, internal in name_map.items():
        path = directory / "params" / f"{external}.npy"
        if internal not in state:
            logger.warning("name map target %s not in model; skipping", internal)
            continue
        tensor = torch.from_numpy(np.load(path))
        if tensor.shape != state[internal].shape:
            raise ValueError(
                f"shape mismatch for {internal}: checkpoint {tuple(tensor.shape)} vs model {tuple(state[internal].shape)}"
            )
        state[internal] = tensor
        filled.append(internal)
    bundle.load_state_dict(state)
    return filled
