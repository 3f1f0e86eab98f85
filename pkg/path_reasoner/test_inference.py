"""Tests for beam search, answer marginals, PMI rescoring and prediction."""

import math

import numpy as np
import pytest

from path_reasoner.inference import (
    PMI_FLOOR,
    PredictOptions,
    ScoredPath,
    answer_distribution,
    beam_search,
    pmi_rescore,
    predict,
    predicted_set,
    prediction_record,
    relation_sequence_scores,
    topic_question,
)
from path_reasoner.kb_store import ReasoningPath
from path_reasoner.path_model import ModelDims, answer_log_prob_exhaustive, init_params, path_log_prob, zero_params


def random_model(kb, seed):
    dims = ModelDims(n_words=6, n_entities=kb.entity_count, n_relations=kb.relation_count,
                     d_word=4, d_entity=4, d_relation=4, d_hidden=4)
    return init_params(dims, seed)


class TestBeamSearch:
    def test_toy_paths(self, toy_kb, toy_params, toy_question):
        r, s = toy_kb.relation_id("r"), toy_kb.relation_id("s")
        results = beam_search(toy_params, toy_kb, toy_question, 0, beam_width=10, max_hops=3)
        assert {scored.path for scored in results} == {
            ReasoningPath((0,), (r,)),
            ReasoningPath((0, 1), (r, s)),
            ReasoningPath((0, 2), (r, s)),
        }
        assert [x.log_prob for x in results] == sorted((x.log_prob for x in results), reverse=True)

    def test_scores_match_path_log_prob(self, toy_kb, toy_params, toy_question):
        for scored in beam_search(toy_params, toy_kb, toy_question, 0, 10, 3):
            expected = path_log_prob(toy_params, toy_kb, toy_question, scored.path).total
            assert scored.log_prob == pytest.approx(expected, abs=1e-12)

    def test_only_kb_relations(self, toy_kb, toy_params, toy_question):
        s = toy_kb.relation_id("s")
        for scored in beam_search(toy_params, toy_kb, toy_question, 0, 10, 3):
            assert scored.path.relations[0] != s

    def test_no_outgoing_relations(self, toy_kb, toy_params, toy_question):
        assert beam_search(toy_params, toy_kb, toy_question, 3, 10, 3) == []

    def test_hop_limit(self, toy_kb, toy_params, toy_question):
        results = beam_search(toy_params, toy_kb, toy_question, 0, 10, 1)
        assert [scored.path.hops for scored in results] == [1]

    def test_invalid_width(self, toy_kb, toy_params, toy_question):
        with pytest.raises(ValueError):
            beam_search(toy_params, toy_kb, toy_question, 0, 0, 3)

    @pytest.mark.parametrize("seed", range(20))
    def test_wide_beam_equals_exhaustive(self, make_random_kb, seed):
        kb = make_random_kb(seed, n_entities=int(10 + 2 * seed), n_relations=1 + seed % 6, n_facts=40)
        params = random_model(kb, seed)
        question = (2, 3, 4)
        topic = seed % kb.entity_count
        results = beam_search(params, kb, question, topic, beam_width=100_000, max_hops=3)
        for scored in results:
            kb.validate_path(scored.path, max_hops=3)
        dist = answer_distribution(kb, results)
        for answer in range(kb.entity_count):
            exhaustive = answer_log_prob_exhaustive(params, kb, question, topic, answer, 3)
            if exhaustive == float("-inf"):
                assert answer not in dist.mass
            else:
                assert math.log(dist.mass[answer]) == pytest.approx(exhaustive, abs=1e-8)

    @pytest.mark.parametrize("seed", range(60))
    def test_beam_results_nested_in_width(self, make_random_kb, seed):
        kb = make_random_kb(seed, n_entities=15, n_relations=3, n_facts=35)
        params = random_model(kb, seed)
        for topic in range(kb.entity_count):
            previous = set()
            for width in (1, 2, 3, 5, 8):
                found = {x.path for x in beam_search(params, kb, (2, 3), topic, width, 3)}
                assert previous <= found, (topic, width)
                previous = found

    def test_narrow_beam_keeps_scores(self, make_random_kb):
        kb = make_random_kb(0, n_entities=15, n_relations=3, n_facts=35)
        params = random_model(kb, 0)
        wide = {x.path: x.log_prob for x in beam_search(params, kb, (2, 3), 8, 100_000, 3)}
        for scored in beam_search(params, kb, (2, 3), 8, 1, 3):
            assert scored.log_prob == pytest.approx(wide[scored.path], abs=1e-12)

    def test_deterministic(self, toy_kb, toy_dims, toy_question):
        params = zero_params(toy_dims)
        first = beam_search(params, toy_kb, toy_question, 0, 1, 3)
        second = beam_search(params, toy_kb, toy_question, 0, 1, 3)
        assert first == second


class TestRelationSequenceScores:
    def test_entity_paths_summed(self, toy_kb, toy_dims, toy_question):
        r, s = toy_kb.relation_id("r"), toy_kb.relation_id("s")
        results = beam_search(zero_params(toy_dims), toy_kb, toy_question, 0, 10, 3)
        scores = relation_sequence_scores(results)
        lp = 3 * math.log(1 / 3) - math.log(2)
        assert [relations for relations, _ in scores] == [(r,), (r, s)]
        assert scores[0][1] == pytest.approx(1 / 9)
        assert scores[1][1] == pytest.approx(2 * math.exp(lp))

    def test_ties_by_relation_ids(self):
        results = [
            ScoredPath(ReasoningPath((0,), (3,)), math.log(0.2)),
            ScoredPath(ReasoningPath((0,), (2,)), math.log(0.2)),
        ]
        assert [relations for relations, _ in relation_sequence_scores(results)] == [(2,), (3,)]


class TestAnswerDistribution:
    def test_single_answer(self, toy_kb):
        r, s = toy_kb.relation_id("r"), toy_kb.relation_id("s")
        dist = answer_distribution(toy_kb, [ScoredPath(ReasoningPath((0, 1), (r, s)), -2.0)])
        assert dist.mass == {3: pytest.approx(math.exp(-2.0))}

    def test_uniform_split(self, toy_kb):
        r = toy_kb.relation_id("r")
        dist = answer_distribution(toy_kb, [ScoredPath(ReasoningPath((0,), (r,)), -1.0)])
        assert dist.mass[1] == dist.mass[2] == pytest.approx(math.exp(-1.0) / 2)

    def test_symmetric_paths_add(self, toy_kb, toy_dims, toy_question):
        results = beam_search(zero_params(toy_dims), toy_kb, toy_question, 0, 10, 3)
        dist = answer_distribution(toy_kb, results)
        lp = 3 * math.log(1 / 3) - math.log(2)
        assert dist.mass[3] == pytest.approx(2 * math.exp(lp))
        assert len(dist.paths[3]) == 2
        for answer, paths in dist.paths.items():
            assert all(answer in toy_kb.final_answer_set(p.path) for p in paths)

    def test_empty(self, toy_kb):
        assert len(answer_distribution(toy_kb, [])) == 0


class TestPmi:
    def test_prefers_specific_answer(self):
        ranked = pmi_rescore({10: 0.3, 11: 0.2}, {10: 0.6, 11: 0.1})
        assert ranked[0][0] == 11
        assert ranked[0][1] == pytest.approx(2.0)

    def test_missing_denominator_floor(self):
        ranked = pmi_rescore({5: 0.1}, {})
        assert ranked == [(5, pytest.approx(0.1 / PMI_FLOOR))]

    def test_uniform_denominator_keeps_argmax(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 12))
            mass = {int(k): float(v) for k, v in zip(rng.permutation(50)[:n], rng.random(n))}
            constant = float(rng.random()) + 1e-3
            raw = sorted(mass.items(), key=lambda item: (-item[1], item[0]))[0][0]
            rescored = pmi_rescore(mass, {answer: constant for answer in mass})[0][0]
            assert rescored == raw


class TestPredict:
    def test_no_answer(self, toy_kb, toy_params, toy_question):
        prediction = predict(toy_params, toy_kb, toy_question, 3, PredictOptions())
        assert prediction.answer is None
        assert not prediction.has_answer
        assert prediction.ranked_answers == []

    def test_ranked_answers_sorted(self, toy_kb, toy_params, toy_question):
        prediction = predict(toy_params, toy_kb, toy_question, 0, PredictOptions())
        assert prediction.answer == prediction.ranked_answers[0][0]
        assert {a for a, _ in prediction.ranked_answers} == {1, 2, 3}
        scores = [score for _, score in prediction.ranked_answers]
        assert scores == sorted(scores, reverse=True)

    def test_ties_pick_smallest_id(self, toy_kb, toy_dims, toy_question):
        prediction = predict(zero_params(toy_dims), toy_kb, toy_question, 0, PredictOptions(max_hops=1))
        assert prediction.answer == 1

    def test_best_path_prediction(self, toy_kb, toy_dims, toy_question):
        options = PredictOptions(marginal_prediction=False)
        prediction = predict(zero_params(toy_dims), toy_kb, toy_question, 0, options)
        lp = 3 * math.log(1 / 3) - math.log(2)
        assert dict(prediction.ranked_answers)[3] == pytest.approx(math.exp(lp))

    def test_pmi_needs_vocabulary(self, toy_kb, toy_params, toy_question):
        with pytest.raises(ValueError):
            predict(toy_params, toy_kb, toy_question, 0, PredictOptions(use_pmi=True))

    def test_pmi(self, toy_kb, toy_params, toy_vocab, toy_question):
        prediction = predict(toy_params, toy_kb, toy_question, 0, PredictOptions(use_pmi=True), toy_vocab)
        assert prediction.use_pmi
        assert prediction.answer in {1, 2, 3}
        assert topic_question(toy_kb, toy_vocab, 0) == (toy_vocab.intern("a"),)

    def test_record(self, toy_kb, toy_params, toy_question):
        prediction = predict(toy_params, toy_kb, toy_question, 0, PredictOptions())
        record = prediction_record(toy_kb, "q", 0, prediction)
        assert record.topic_entity == "a"
        assert record.answer == toy_kb.entity_name(prediction.answer)
        relations, entities, _ = record.ranked_paths[0]
        assert entities[0] == "a" and len(relations) == len(entities)


class TestPredictedSet:
    def test_threshold(self):
        ranked = [(1, 0.6), (2, 0.3), (3, 0.29)]
        assert predicted_set(ranked, 0.5) == {1, 2}
        assert predicted_set(ranked, 1.0) == {1}
        assert predicted_set([], 0.5) == set()
