import numpy as np
import pytest

from mathpretext import pretext
from mathpretext.pretext import (
    NROP,
    ORDER_PRESERVED,
    ORDER_SWAPPED,
    ROP,
    apply_mlm_mask,
    assemble_ss_input,
    cache_filename,
    make_order_sample,
    make_qra_sample,
    mask_count,
    read_samples,
    regenerate_epoch_samples,
    write_samples,
)
from mathpretext.synthetic import generate_problems
from mathpretext.tokenizer import WhitespaceTokenizer

from conftest import FakeRng, corpus_tokenizer


from string import ascii_lowercase


def words(prefix: str, n: int) -> list[str]:
    """Alphabetic-only words so each one is a single token."""
    return [f"{prefix}{a}{b}" for a in ascii_lowercase for b in ascii_lowercase][:n]


@pytest.fixture(scope="module")
def tok():
    corpus_words = " ".join(words("q", 40) + words("r", 40))
    return WhitespaceTokenizer.from_corpus([corpus_words])


class TestAssembly:
    def test_layout_lengths_and_segments(self, tok):
        question = " ".join(words("q", 10))
        steps = [" ".join(words("r", 12)), " ".join(words("r", 20)[12:])]
        enc = assemble_ss_input(question, steps, tok)
        assert len(enc) == 33
        assert enc.segments.count(0) == 12
        assert enc.segments.count(1) == 21
        assert enc.ids[0] == tok.vocab.cls_id
        assert enc.positions == list(range(33))

    def test_empty_rationale(self, tok):
        question = " ".join(words("q", 3))
        enc = assemble_ss_input(question, [], tok)
        assert enc.ids == [tok.vocab.cls_id] + tok.encode_text(question) + [tok.vocab.sep_id]
        assert set(enc.segments) == {0}

    def test_rationale_span_is_segment_one_throughout(self):
        problems = generate_problems(3, seed=0)
        tok = corpus_tokenizer(problems)
        p = problems[0]
        steps = p.rationale.splitlines()
        enc = assemble_ss_input(p.question, steps, tok)
        first_sep = enc.ids.index(tok.vocab.sep_id)
        assert all(s == 1 for s in enc.segments[first_sep + 1 :])

    def test_truncation_drops_rationale_before_question(self, tok):
        question = " ".join(words("q", 10))
        steps = [" ".join(words("r", 30))]
        enc = assemble_ss_input(question, steps, tok, max_len=20)
        assert len(enc) == 20
        # all question tokens survive; rationale tail dropped
        assert enc.segments.count(0) == 12
        assert enc.segments.count(1) == 8

    def test_question_truncated_last_with_warning(self, tok, caplog):
        question = " ".join(words("q", 30))
        with caplog.at_level("WARNING"):
            enc = assemble_ss_input(question, [" ".join(words("r", 2))], tok, max_len=12)
        assert len(enc) == 12
        assert "question alone exceeds" in caplog.text
        assert set(enc.segments) == {0}

    def test_empty_question_rejected(self, tok):
        with pytest.raises(ValueError):
            assemble_ss_input("", ["ra"], tok)

    def test_number_masking_flag(self):
        problems = generate_problems(2, seed=0)
        tok = corpus_tokenizer(problems)
        enc = assemble_ss_input("8 man work for 6 days", [], tok, mask_numbers=True)
        num_id = tok.vocab.num_id
        id_of = {t: tok.vocab.id(t) for t in ["8", "man", "6"]}
        assert enc.ids.count(num_id) == 2
        assert id_of["8"] not in enc.ids
        assert id_of["6"] not in enc.ids


class TestMlmMask:
    def test_span_of_twenty_masks_three(self, tok):
        question = " ".join(words("q", 20))
        enc = assemble_ss_input(question, [], tok)
        sample = apply_mlm_mask(enc, tok.vocab, np.random.default_rng(0))
        assert len(sample.mlm_targets) == 3

    def test_span_of_three_masks_one(self, tok):
        enc = assemble_ss_input(" ".join(words("q", 3)), [], tok)
        sample = apply_mlm_mask(enc, tok.vocab, np.random.default_rng(0))
        assert len(sample.mlm_targets) == 1

    def test_masked_positions_hold_mask_token_and_targets_restore(self, tok):
        question = " ".join(words("q", 15))
        steps = [" ".join(words("r", 20))]
        enc = assemble_ss_input(question, steps, tok)
        for seed in range(30):
            sample = apply_mlm_mask(enc, tok.vocab, np.random.default_rng(seed))
            restored = list(sample.input.ids)
            for pos, original in sample.mlm_targets.items():
                assert sample.input.ids[pos] == tok.vocab.mask_id
                restored[pos] = original
            assert restored == enc.ids
            assert sample.input.segments == enc.segments

    def test_mask_stays_inside_one_segment(self, tok):
        question = " ".join(words("q", 15))
        steps = [" ".join(words("r", 20))]
        enc = assemble_ss_input(question, steps, tok)
        for seed in range(40):
            sample = apply_mlm_mask(enc, tok.vocab, np.random.default_rng(seed))
            segs = {enc.segments[pos] for pos in sample.mlm_targets}
            assert len(segs) == 1
            seg = segs.pop()
            span = sum(1 for s in enc.segments if s == seg) - 1  # minus the [SEP]
            if seg == 0:
                span -= 1  # minus the [CLS]
            assert len(sample.mlm_targets) == mask_count(span)

    def test_specials_never_masked(self, tok):
        enc = assemble_ss_input("qa", ["ra"], tok)
        for seed in range(20):
            sample = apply_mlm_mask(enc, tok.vocab, np.random.default_rng(seed))
            for pos in sample.mlm_targets:
                assert enc.ids[pos] not in tok.vocab.special_ids

    def test_empty_rationale_falls_back_to_question(self, tok):
        enc = assemble_ss_input(" ".join(words("q", 4)), [], tok)
        # force the rationale branch: both rng streams eventually pick span 1
        for seed in range(10):
            sample = apply_mlm_mask(enc, tok.vocab, np.random.default_rng(seed))
            assert sample.mlm_targets, "fallback must still mask the question span"

    def test_bert_strategy_records_targets(self, tok):
        question = " ".join(words("q", 20))
        enc = assemble_ss_input(question, [], tok)
        sample = apply_mlm_mask(enc, tok.vocab, np.random.default_rng(1), strategy="bert")
        assert len(sample.mlm_targets) == 3
        restored = list(sample.input.ids)
        for pos, original in sample.mlm_targets.items():
            restored[pos] = original
        assert restored == enc.ids


class TestOrderSample:
    def test_rop_specific_draw(self):
        # pairs of 3 steps: (0,1), (0,2), (1,2); index 1 picks (0,2)
        out = make_order_sample(["s1", "s2", "s3"], ROP, FakeRng(randoms=[0.9], integers=[1]))
        assert out == (("s3", "s2", "s1"), ORDER_SWAPPED)

    def test_nrop_specific_draw(self):
        out = make_order_sample(["s1", "s2", "s3"], NROP, FakeRng(randoms=[0.9], integers=[1]))
        assert out == (("s1", "s3", "s2"), ORDER_SWAPPED)

    def test_preserved_branch(self):
        out = make_order_sample(["s1", "s2"], ROP, FakeRng(randoms=[0.1]))
        assert out == (("s1", "s2"), ORDER_PRESERVED)

    def test_too_few_steps(self):
        assert make_order_sample(["only"], ROP, FakeRng()) is None
        assert make_order_sample([], NROP, FakeRng()) is None

    @pytest.mark.parametrize("variant", [ROP, NROP])
    def test_label_base_rate(self, variant):
        rng = np.random.default_rng(12)
        steps = [f"s{i}" for i in range(5)]
        n = 20000
        swapped = sum(
            make_order_sample(steps, variant, rng)[1] == ORDER_SWAPPED for _ in range(n)
        )
        assert abs(swapped / n - 0.5) < 0.02

    @pytest.mark.parametrize("variant", [ROP, NROP])
    def test_swap_involution_and_distance(self, variant):
        rng = np.random.default_rng(5)
        for _ in range(500):
            n = int(rng.integers(2, 9))
            steps = tuple(f"s{i}" for i in range(n))
            permuted, label = make_order_sample(steps, variant, rng)
            if label == ORDER_PRESERVED:
                assert permuted == steps
                continue
            moved = [i for i in range(n) if permuted[i] != steps[i]]
            assert len(moved) == 2
            i, j = moved
            if variant == NROP:
                assert j - i == 1
            else:
                assert 1 <= j - i <= n - 1
            swapped_back = list(permuted)
            swapped_back[i], swapped_back[j] = swapped_back[j], swapped_back[i]
            assert tuple(swapped_back) == steps


class TestQra:
    def test_batch_of_two_forced_substitution(self):
        problems = generate_problems(2, seed=0)
        tok = corpus_tokenizer(problems)
        batch = [("q one 1", ["r1 a"]), ("q two 2", ["r2 b"])]
        rng = FakeRng(randoms=[0.1, 0.1], integers=[0, 0])
        samples = make_qra_sample(batch, tok, rng)
        assert [s.matched for s in samples] == [0, 0]

    def test_number_tokens_become_num(self):
        problems = generate_problems(2, seed=0)
        tok = corpus_tokenizer(problems)
        batch = [("8 man work for 6 days", ["8 * 6 = 48"]), ("other question", ["step"])]
        samples = make_qra_sample(batch, tok, np.random.default_rng(0))
        num_id = tok.vocab.num_id
        assert samples[0].input.ids.count(num_id) >= 2

    def test_label_base_rate(self):
        problems = generate_problems(16, seed=0)
        tok = corpus_tokenizer(problems)
        batch = [(p.question, p.rationale.splitlines()) for p in problems]
        rng = np.random.default_rng(9)
        matched = 0
        total = 0
        for _ in range(700):
            for s in make_qra_sample(batch, tok, rng):
                matched += s.matched
                total += 1
        assert abs(matched / total - 0.5) < 0.02

    def test_singleton_batch_warns_all_matched(self, caplog):
        problems = generate_problems(1, seed=0)
        tok = corpus_tokenizer(problems)
        with caplog.at_level("WARNING"):
            samples = make_qra_sample([("q 1", ["r 1"])], tok, np.random.default_rng(0))
        assert [s.matched for s in samples] == [1]
        assert "cannot form a negative" in caplog.text


class TestRegeneration:
    @pytest.fixture(scope="class")
    def problems(self):
        return generate_problems(120, seed=2)

    @pytest.fixture(scope="class")
    def tok(self, problems):
        return corpus_tokenizer(problems)

    def _swap_signature(self, samples):
        return [tuple(s.input.ids) for s in samples if s.order_label is not None]

    def test_swaps_shared_inside_regen_window_masks_differ(self, problems, tok):
        e0 = regenerate_epoch_samples(problems, tok, seed=1, epoch=0, variant=NROP)
        e1 = regenerate_epoch_samples(problems, tok, seed=1, epoch=1, variant=NROP)
        assert [s.order_label for s in e0] == [s.order_label for s in e1]
        restored0 = [_restore(s) for s in e0]
        restored1 = [_restore(s) for s in e1]
        assert restored0 == restored1, "underlying (swapped) token streams must match"
        assert any(s0.mlm_targets != s1.mlm_targets for s0, s1 in zip(e0, e1))

    def test_swaps_redrawn_at_window_boundary(self, problems, tok):
        e1 = regenerate_epoch_samples(problems, tok, seed=1, epoch=1, variant=NROP)
        e2 = regenerate_epoch_samples(problems, tok, seed=1, epoch=2, variant=NROP)
        labels1 = [s.order_label for s in e1]
        labels2 = [s.order_label for s in e2]
        assert labels1 != labels2

    def test_same_seed_same_epoch_bit_identical(self, problems, tok):
        a = regenerate_epoch_samples(problems, tok, seed=3, epoch=4, variant=ROP)
        b = regenerate_epoch_samples(problems, tok, seed=3, epoch=4, variant=ROP)
        for s, t in zip(a, b):
            assert s.input.ids == t.input.ids
            assert s.mlm_targets == t.mlm_targets
            assert s.order_label == t.order_label

    def test_short_rationales_yield_mask_only_samples(self, tok):
        problems = generate_problems(5, seed=3)
        single = [
            type(p)(p.id, p.question, p.options, "only one step", p.correct) for p in problems
        ]
        samples = regenerate_epoch_samples(single, tok, seed=0, epoch=0, variant=NROP)
        assert all(s.order_label is None for s in samples)
        assert all(s.mlm_targets for s in samples)


def _restore(sample):
    ids = list(sample.input.ids)
    for pos, original in sample.mlm_targets.items():
        ids[pos] = original
    return ids


class TestCache:
    def test_round_trip(self, tmp_path):
        problems = generate_problems(25, seed=6)
        tok = corpus_tokenizer(problems)
        samples = regenerate_epoch_samples(problems, tok, seed=0, epoch=0, variant=NROP)
        path = tmp_path / cache_filename("abc123", 0, 0, NROP)
        write_samples(path, samples)
        loaded = read_samples(path)
        assert len(loaded) == len(samples)
        for s, t in zip(samples, loaded):
            assert s.input.ids == t.input.ids
            assert s.input.segments == t.input.segments
            assert s.input.positions == t.input.positions
            assert s.mlm_targets == t.mlm_targets
            assert s.order_label == t.order_label

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a cache")
        with pytest.raises(ValueError):
            read_samples(path)
