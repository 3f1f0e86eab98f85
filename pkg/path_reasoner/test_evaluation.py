from dataclasses import replace

import pytest

from path_reasoner import evaluation
from path_reasoner.evaluation import MULTI_PATH, SINGLE_PATH, evaluate, f1, set_accuracy
from path_reasoner.inference import PredictOptions, Prediction


def fake_predict(answers_by_topic):
    """Stand-in for inference.predict returning fixed ranked answers per topic entity."""

    def predict(params, kb, question, e0, options, vocab=None):
        ranked = answers_by_topic.get(e0, [])
        return Prediction(
            answer=ranked[0][0] if ranked else None,
            ranked_answers=ranked,
            ranked_paths=[],
        )

    return predict


class TestMetrics:
    def test_f1(self):
        assert f1({1}, {1}) == 1.0
        assert f1({1, 2}, {1}) == pytest.approx(2 / 3)
        assert f1(set(), {1}) == 0.0
        assert f1({5}, {1, 2}) == 0.0

    def test_f1_needs_gold(self):
        with pytest.raises(ValueError):
            f1({1}, set())

    def test_set_accuracy(self):
        assert set_accuracy({1, 2}, {2, 1}) == 1
        assert set_accuracy({1}, {1, 2}) == 0


class TestEvaluate:
    def test_perfect(self, monkeypatch, toy_kb, toy_params, toy_instance):
        monkeypatch.setattr(evaluation, "predict", fake_predict({0: [(3, 0.9), (1, 0.1)]}))
        report = evaluate(toy_params, toy_kb, [toy_instance], PredictOptions())
        assert report.average_f1 == report.set_accuracy == 1.0
        assert report.groups[MULTI_PATH].count == 1
        assert report.groups[SINGLE_PATH].count == 0

    def test_half(self, monkeypatch, toy_kb, toy_params, toy_instance):
        monkeypatch.setattr(evaluation, "predict", fake_predict({0: [(3, 0.9)], 1: [(2, 0.9)]}))
        other = replace(toy_instance, question_id="toy-2", topic_entity=1)
        report = evaluate(toy_params, toy_kb, [toy_instance, other], PredictOptions())
        assert report.average_f1 == 0.5
        assert report.instance_count == 2
        assert report.groups[SINGLE_PATH].count + report.groups[MULTI_PATH].count == 2
        assert report.groups[SINGLE_PATH].f1 == 0.0

    def test_no_answer_counted(self, monkeypatch, toy_kb, toy_params, toy_instance):
        monkeypatch.setattr(evaluation, "predict", fake_predict({}))
        report = evaluate(toy_params, toy_kb, [toy_instance], PredictOptions())
        assert report.no_answer_count == 1
        assert report.average_f1 == 0.0

    def test_expanded_instances_regrouped(self, monkeypatch, toy_kb, toy_params, toy_instance):
        monkeypatch.setattr(evaluation, "predict", fake_predict({0: [(1, 0.5), (2, 0.4), (3, 0.01)]}))
        copies = [
            replace(toy_instance, answers=(answer,), gold_answers=(1, 2), annotated_path=None)
            for answer in (1, 2)
        ]
        report = evaluate(toy_params, toy_kb, copies, PredictOptions(tau=0.5))
        assert report.instance_count == 1
        assert report.set_accuracy == 1.0

    def test_topic_entities_merged_by_max(self, monkeypatch, toy_kb, toy_params, toy_instance):
        monkeypatch.setattr(evaluation, "predict", fake_predict({0: [(1, 0.2), (3, 0.1)], 1: [(3, 0.8)]}))
        second_topic = replace(toy_instance, topic_entity=1)
        ranked = evaluation.predict_question(toy_params, toy_kb, [toy_instance, second_topic], PredictOptions())
        assert ranked == [(3, 0.8), (1, 0.2)]

    def test_table(self, monkeypatch, toy_kb, toy_params, toy_instance):
        monkeypatch.setattr(evaluation, "predict", fake_predict({0: [(3, 1.0)]}))
        table = evaluate(toy_params, toy_kb, [toy_instance], PredictOptions()).to_table()
        assert SINGLE_PATH in table and MULTI_PATH in table
        assert "100.0%" in table

    def test_real_predict(self, toy_kb, toy_params, toy_instance):
        report = evaluate(toy_params, toy_kb, [toy_instance], PredictOptions())
        assert 0.0 <= report.average_f1 <= 1.0
        assert report.no_answer_count == 0
