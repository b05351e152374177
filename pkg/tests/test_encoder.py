import math
import time

import numpy as np
import pytest
import torch

from mathpretext.encoder import (
    EncoderConfig,
    EncoderOverflowError,
    ModelBundle,
    batch_inputs,
    load_checkpoint,
    load_pretrained_trunk,
    preset_config,
    save_checkpoint,
)
from mathpretext.pretext import EncodedInput


def make_input(n, vocab_size, seg_split=None, rng=None):
    rng = rng or np.random.default_rng(0)
    ids = [2] + [int(rng.integers(6, vocab_size)) for _ in range(n - 1)]
    seg_split = seg_split if seg_split is not None else n
    segments = [0 if i < seg_split else 1 for i in range(n)]
    return EncodedInput(ids=ids, segments=segments, positions=list(range(n)), mask=[1] * n)


class TestConfig:
    def test_hidden_must_divide_heads(self):
        with pytest.raises(ValueError):
            EncoderConfig(layers=1, heads=3, hidden=32, ffn=64, vocab_size=10)

    def test_presets(self):
        toy = preset_config("toy", 100)
        assert (toy.layers, toy.heads, toy.hidden) == (4, 4, 128)
        base = preset_config("base", 30000)
        assert (base.layers, base.heads, base.hidden, base.ffn) == (12, 12, 768, 3072)
        with pytest.raises(ValueError):
            preset_config("huge", 10)


class TestEncode:
    def test_minimal_input_is_finite(self, tiny_bundle):
        tiny_bundle.eval()
        states, cls_state = tiny_bundle.encode(make_input(2, tiny_bundle.config.vocab_size))
        assert torch.isfinite(states).all()
        assert torch.isfinite(cls_state).all()
        assert cls_state.shape == (tiny_bundle.config.hidden,)

    def test_eval_mode_deterministic(self, tiny_bundle):
        tiny_bundle.eval()
        enc = make_input(12, tiny_bundle.config.vocab_size, seg_split=6)
        _, a = tiny_bundle.encode(enc)
        _, b = tiny_bundle.encode(enc)
        assert float((a - b).abs().max()) <= 1e-6

    def test_padding_content_cannot_leak_into_cls(self, tiny_bundle):
        tiny_bundle.eval()
        vocab_size = tiny_bundle.config.vocab_size
        enc = make_input(10, vocab_size)
        short = EncodedInput(
            ids=enc.ids + [0, 0, 0],
            segments=enc.segments + [0, 0, 0],
            positions=enc.positions + [10, 11, 12],
            mask=enc.mask + [0, 0, 0],
        )
        noisy = EncodedInput(
            ids=enc.ids + [7, 8, 9],
            segments=enc.segments + [1, 1, 0],
            positions=enc.positions + [12, 10, 11],
            mask=enc.mask + [0, 0, 0],
        )
        _, a = tiny_bundle.encode(short)
        _, b = tiny_bundle.encode(noisy)
        assert torch.equal(a, b)

    def test_length_overflow_rejected(self, tiny_bundle):
        n = tiny_bundle.config.max_positions + 1
        enc = EncodedInput(ids=[2] * n, segments=[0] * n, positions=[0] * n, mask=[1] * n)
        with pytest.raises(EncoderOverflowError):
            tiny_bundle.encode(enc)

    def test_toy_forward_under_one_second(self):
        torch.manual_seed(0)
        bundle = ModelBundle(preset_config("toy", 500), heads=("mlm",))
        bundle.eval()
        rng = np.random.default_rng(0)
        encs = [make_input(128, 500, rng=rng) for _ in range(16)]
        batch = batch_inputs(encs)
        with torch.no_grad():
            bundle.forward_states(batch)  # warm-up
            start = time.perf_counter()
            bundle.forward_states(batch)
            elapsed = time.perf_counter() - start
        assert elapsed < 1.0, f"toy forward took {elapsed:.2f}s"


class TestLosses:
    def test_mlm_loss_uniform_logits_is_log_vocab(self, tiny_bundle):
        head = tiny_bundle.heads["mlm"]
        torch.nn.init.zeros_(head.decoder.weight)
        torch.nn.init.zeros_(head.decoder.bias)
        states = torch.randn(2, 8, tiny_bundle.config.hidden)
        loss = tiny_bundle.mlm_loss(states, [{1: 7, 3: 9}, {2: 11}])
        assert math.isclose(float(loss), math.log(tiny_bundle.config.vocab_size), rel_tol=1e-6)

    def test_mlm_loss_confident_correct_goes_to_zero(self, tiny_bundle):
        class OneHot(torch.nn.Module):
            def __init__(self, vocab_size, target):
                super().__init__()
                self.vocab_size = vocab_size
                self.target = target

            def forward(self, states):
                logits = torch.zeros(states.shape[0], self.vocab_size)
                logits[:, self.target] = 1e4
                return logits

        tiny_bundle.heads["mlm"] = OneHot(tiny_bundle.config.vocab_size, target=7)
        states = torch.randn(1, 8, tiny_bundle.config.hidden)
        loss = tiny_bundle.mlm_loss(states, [{1: 7, 5: 7}])
        assert float(loss) < 1e-6

    def test_mlm_loss_ignores_unmasked_positions(self, tiny_bundle):
        tiny_bundle.eval()
        states = torch.randn(1, 10, tiny_bundle.config.hidden)
        targets = [{2: 5, 7: 9}]
        loss_a = tiny_bundle.mlm_loss(states, targets)
        perturbed = states.clone()
        perturbed[0, 0] += 10.0
        perturbed[0, 5] -= 3.0
        loss_b = tiny_bundle.mlm_loss(perturbed, targets)
        assert torch.isclose(loss_a, loss_b)

    def test_mlm_loss_empty_targets_contributes_zero(self, tiny_bundle):
        states = torch.randn(2, 6, tiny_bundle.config.hidden, requires_grad=True)
        loss = tiny_bundle.mlm_loss(states, [{}, {}])
        assert float(loss) == 0.0
        loss.backward()  # still connected to the graph

    def test_order_loss_zero_logit_is_log_two(self, tiny_bundle):
        head = tiny_bundle.heads["order"]
        torch.nn.init.zeros_(head.weight)
        torch.nn.init.zeros_(head.bias)
        cls_state = torch.randn(4, tiny_bundle.config.hidden)
        loss = tiny_bundle.order_loss(cls_state, torch.tensor([0, 1, 0, 1]))
        assert math.isclose(float(loss), math.log(2.0), rel_tol=1e-6)

    def test_qa_forward_is_probability_simplex(self, tiny_bundle):
        cls_state = torch.randn(16, tiny_bundle.config.hidden)
        probs = tiny_bundle.qa_forward(cls_state)
        assert probs.shape == (16, 5)
        assert float((probs.sum(dim=-1) - 1).abs().max()) < 1e-6
        assert float(probs.min()) >= 0.0
        assert float(probs.max()) <= 1.0

    def test_match_score_in_unit_interval(self, tiny_bundle):
        a = torch.randn(8, tiny_bundle.config.hidden)
        b = torch.randn(8, tiny_bundle.config.hidden)
        s = tiny_bundle.match_score(a, b)
        assert s.shape == (8,)
        assert float(s.min()) >= 0.0 and float(s.max()) <= 1.0


class TestFinetuneTransition:
    def test_ss_heads_discarded_trunk_size_kept(self, tiny_config):
        torch.manual_seed(1)
        bundle = ModelBundle(tiny_config, heads=("mlm", "order"))
        trunk_before = bundle.trunk_parameter_count()
        ft = bundle.for_finetuning("ORIG")
        assert ft.head_names == ("qa",)
        assert ft.trunk_parameter_count() == trunk_before
        for name, param in ft.encoder.state_dict().items():
            assert torch.equal(param, bundle.encoder.state_dict()[name])

    def test_same_finetune_size_regardless_of_pretext_heads(self, tiny_config):
        torch.manual_seed(2)
        a = ModelBundle(tiny_config, heads=("mlm",)).for_finetuning("ORIG")
        b = ModelBundle(tiny_config, heads=("mlm", "order", "qra")).for_finetuning("ORIG")
        assert a.parameter_count() == b.parameter_count()

    def test_sep_schemes_get_match_head(self, tiny_config):
        bundle = ModelBundle(tiny_config, heads=("mlm", "order"))
        assert bundle.for_finetuning("SEP-NC").head_names == ("match",)
        assert bundle.for_finetuning("SEP-C").head_names == ("match",)


class TestCheckpoint:
    def test_round_trip(self, tiny_bundle, tmp_path):
        save_checkpoint(tiny_bundle, tmp_path / "ckpt")
        loaded = load_checkpoint(tmp_path / "ckpt")
        assert loaded.config == tiny_bundle.config
        assert loaded.head_names == tiny_bundle.head_names
        for name, tensor in tiny_bundle.state_dict().items():
            assert torch.equal(tensor, loaded.state_dict()[name])

    def test_external_name_map_fills_trunk(self, tiny_bundle, tmp_path):
        import json

        ckpt = tmp_path / "external"
        save_checkpoint(tiny_bundle, ckpt)
        params = ckpt / "params"
        name_map = {}
        for path in params.glob("encoder.token_embedding.*.npy"):
            internal = path.name[: -len(".npy")]
            external = internal.replace("encoder.token_embedding", "bert.embeddings.word")
            path.rename(params / f"{external}.npy")
            name_map[external] = internal
        (ckpt / "name_map.json").write_text(json.dumps(name_map))

        torch.manual_seed(99)
        fresh = ModelBundle(tiny_bundle.config, heads=tiny_bundle.head_names)
        filled = load_pretrained_trunk(fresh, ckpt)
        assert "encoder.token_embedding.weight" in filled
        assert torch.equal(
            fresh.encoder.token_embedding.weight, tiny_bundle.encoder.token_embedding.weight
        )
