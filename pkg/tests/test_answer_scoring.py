import numpy as np
import pytest

from mathpretext.answer_scoring import (
    CandidateCountError,
    CandidateSet,
    ScoredAnswer,
    assemble_qa_input,
    assemble_sep_c_input,
    augment_permutations,
    prediction_rows,
    read_predictions,
    score_problems,
    sep_c_positions,
    sep_c_score,
    sep_nc_score,
    write_predictions,
)
from mathpretext.corpus import Problem, option_value
from mathpretext.synthetic import generate_problems
from mathpretext.tokenizer import SPECIAL_TOKENS, SubwordTokenizer, Vocab

from conftest import corpus_tokenizer


def division_problem():
    return Problem(
        id="t2",
        question="How much is 27 / 3",
        options=("A)13", "B)9", "C)3", "D)12", "E)17"),
        rationale="27 / 3 = 9",
        correct="B",
    )


def char_tokenizer():
    return SubwordTokenizer(Vocab(list(SPECIAL_TOKENS) + [str(d) for d in range(10)] + [";"]))


class TestCandidateSet:
    def test_from_problem(self):
        cs = CandidateSet.from_problem(division_problem())
        assert cs.values == ("13", "9", "3", "12", "17")
        assert cs.order == (0, 1, 2, 3, 4)

    def test_permuted_tracks_source_order(self):
        cs = CandidateSet.from_problem(division_problem()).permuted([4, 3, 2, 1, 0])
        assert cs.values == ("17", "12", "3", "9", "13")
        assert cs.order == (4, 3, 2, 1, 0)

    def test_wrong_count_rejected(self):
        with pytest.raises(CandidateCountError):
            CandidateSet(values=("1", "2"), order=(0, 1))


class TestAssembleQaInput:
    def test_contains_all_five_values(self):
        p = division_problem()
        tok = corpus_tokenizer([p])
        enc = assemble_qa_input(p.question, p.option_values(), tok)
        ids = enc.ids
        for value in p.option_values():
            assert tok.vocab.id(value) in ids
        assert ids.count(tok.vocab.id(";")) == 4
        assert enc.positions == list(range(len(ids)))
        seg1_start = enc.segments.index(1)
        assert all(s == 0 for s in enc.segments[:seg1_start])
        assert all(s == 1 for s in enc.segments[seg1_start:])

    def test_candidate_count_enforced(self):
        p = division_problem()
        tok = corpus_tokenizer([p])
        with pytest.raises(CandidateCountError):
            assemble_qa_input(p.question, ("1", "2", "3"), tok)

    def test_deterministic(self):
        p = division_problem()
        tok = corpus_tokenizer([p])
        a = assemble_qa_input(p.question, p.option_values(), tok)
        b = assemble_qa_input(p.question, p.option_values(), tok)
        assert a.ids == b.ids and a.positions == b.positions

    def test_truncation_drops_question_never_candidates(self):
        p = division_problem()
        tok = corpus_tokenizer([p])
        n_answer = 5 + 4  # five single-token values + four separators
        enc = assemble_qa_input(p.question, p.option_values(), tok, max_len=n_answer + 3 + 2)
        assert enc.ids.count(tok.vocab.id(";")) == 4
        for value in p.option_values():
            assert tok.vocab.id(value) in enc.ids
        assert enc.segments.count(0) == 2 + 2  # [CLS] + 2 surviving question tokens + [SEP]

    def test_candidates_that_cannot_fit_rejected(self):
        p = division_problem()
        tok = corpus_tokenizer([p])
        with pytest.raises(ValueError):
            assemble_qa_input(p.question, p.option_values(), tok, max_len=8)


class TestAugmentPermutations:
    def test_twenty_five_distinct_non_identity(self):
        p = division_problem()
        variants = augment_permutations(p, np.random.default_rng(0), n=25)
        assert len(variants) == 25
        seen = set()
        for v in variants:
            order = tuple(v.option_values())
            assert order != p.option_values()
            seen.add(order)
        assert len(seen) == 25

    def test_correct_value_preserved(self):
        p = division_problem()
        for v in augment_permutations(p, np.random.default_rng(1), n=40):
            assert option_value(v.options[v.correct_index]) == "9"

    def test_seeds_differ(self):
        p = division_problem()
        a = augment_permutations(p, np.random.default_rng(0), n=25)
        b = augment_permutations(p, np.random.default_rng(1), n=25)
        assert [v.options for v in a] != [v.options for v in b]

    def test_all_119_allowed_but_not_more(self):
        p = division_problem()
        variants = augment_permutations(p, np.random.default_rng(2), n=119)
        assert len({tuple(v.option_values()) for v in variants}) == 119
        with pytest.raises(ValueError):
            augment_permutations(p, np.random.default_rng(2), n=120)


class TestSepCPositions:
    def test_appendix_walkthrough_values(self):
        tok = char_tokenizer()
        values = ("10", "20", "30", "40", "50")
        tokens = []
        for i, v in enumerate(values):
            if i:
                tokens.append(";")
            tokens.extend(tok.tokenize(v))
        positions = sep_c_positions(values, tok)
        assert len(positions) == len(tokens) == 14
        zero_positions = {p for t, p in zip(tokens, positions) if t == "0"}
        assert len(zero_positions) == 1
        lead_positions = {p for t, p in zip(tokens, positions) if t in "12345"}
        assert lead_positions == {0}

    def test_single_candidate_plain_numbering(self):
        tok = char_tokenizer()
        assert sep_c_positions(("1234",), tok) == [0, 1, 2, 3]

    def test_max_position_invariant_under_permutation(self):
        tok = char_tokenizer()
        rng = np.random.default_rng(0)
        for _ in range(200):
            values = tuple(str(int(rng.integers(1, 10 ** int(rng.integers(1, 6))))) for _ in range(5))
            base = max(sep_c_positions(values, tok))
            for _ in range(5):
                perm = rng.permutation(5)
                shuffled = tuple(values[i] for i in perm)
                assert max(sep_c_positions(shuffled, tok)) == base

    def test_joint_input_resets_answer_span(self):
        p = division_problem()
        tok = corpus_tokenizer([p])
        enc = assemble_sep_c_input(p.question, p.option_values(), tok)
        answer_start = enc.segments.index(1)
        span = enc.positions[answer_start:-1]
        # five single-token candidates: each candidate token sits at offset 0
        assert span == [0, 0, 0, 0, 0, 0, 0, 0, 0]
        assert enc.positions[-1] == span[-1]
        q_span = enc.positions[:answer_start]
        assert q_span == list(range(answer_start))


class TestSepScoring:
    def test_sep_nc_score_ignores_other_candidates(self, tiny_bundle):
        problems = generate_problems(4, seed=0)
        tok = corpus_tokenizer(problems)
        tiny = tiny_bundle
        tiny.eval()
        p = problems[0]
        values = p.option_values()
        direct = [sep_nc_score(tiny, p.question, v, tok) for v in values]
        scored = score_problems(tiny, [p], "SEP-NC", tok)[0]
        assert np.allclose(direct, scored.scores, atol=1e-6)

        shuffled = Problem(p.id, p.question, tuple(f"{l}){v}" for l, v in zip("ABCDE", values[::-1])), p.rationale, "A")
        scored_rev = score_problems(tiny, [shuffled], "SEP-NC", tok)[0]
        assert np.allclose(scored.scores[::-1], scored_rev.scores, atol=1e-6)

    def test_sep_c_scores_valid_and_candidate_checked(self, tiny_bundle):
        problems = generate_problems(3, seed=1)
        tok = corpus_tokenizer(problems)
        tiny_bundle.eval()
        p = problems[0]
        values = p.option_values()
        for v in values:
            s = sep_c_score(tiny_bundle, p.question, values, v, tok)
            assert 0.0 <= s <= 1.0
        with pytest.raises(ValueError):
            sep_c_score(tiny_bundle, p.question, values, "not-a-value", tok)

    def test_orig_probabilities_sum_to_one_sep_scores_do_not_need_to(self, tiny_bundle):
        problems = generate_problems(4, seed=2)
        tok = corpus_tokenizer(problems)
        tiny_bundle.eval()
        orig = score_problems(tiny_bundle, problems, "ORIG", tok)
        for s in orig:
            assert abs(sum(s.scores) - 1.0) < 1e-6
        sep = score_problems(tiny_bundle, problems, "SEP-NC", tok)
        assert all(0.0 <= x <= 1.0 for s in sep for x in s.scores)


class TestScoredAnswer:
    def test_argmax_tie_breaks_to_lowest_index(self):
        s = ScoredAnswer.from_scores([0.2, 0.5, 0.5, 0.1, 0.5], scheme="ORIG")
        assert s.chosen == 1
        s = ScoredAnswer.from_scores([0.5, 0.5, 0.5, 0.5, 0.5], scheme="ORIG")
        assert s.chosen == 0


class TestPredictionDump:
    def test_round_trip(self, tmp_path):
        problems = generate_problems(6, seed=3)
        scored = [
            ScoredAnswer.from_scores(np.random.default_rng(i).random(5), "ORIG")
            for i in range(6)
        ]
        rows = prediction_rows(problems, scored)
        path = tmp_path / "preds.jsonl"
        write_predictions(path, rows)
        assert read_predictions(path) == rows
        for row in rows:
            assert set(row) == {"problem_id", "scheme", "scores", "chosen", "correct"}
