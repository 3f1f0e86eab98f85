"""
Tests for the path model: step equations, path probabilities, the exhaustive
marginal and the hand-written gradients.
"""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from path_reasoner.errors import EmptyQuestionError, InvalidPathError
from path_reasoner.kb_store import EOP_ID, SOP_ID, KnowledgeBase, ReasoningPath
from path_reasoner.objectives import ObjectiveVariant, PathBatchItem
from path_reasoner.path_model import (
    PARAM_ORDER,
    ModelDims,
    answer_log_prob_exhaustive,
    entity_transition_prob,
    init_params,
    joint_log_prob,
    loss_and_grad,
    path_log_prob,
    step,
    zero_params,
)

TOY_FACTS = [("a", "r", "b"), ("a", "r", "c"), ("b", "s", "d"), ("c", "s", "d")]


def reference_step(params, h_prev, r_prev, e_prev, question):
    """The recurrence written out element by element."""
    p = params.tensors
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    dh = params.dims.d_hidden
    x = p["relation_emb"][r_prev]

    def gate(name, act, reset=None):
        out = np.zeros(dh)
        for i in range(dh):
            wx = sum(p[f"gru_W_{name}"][i, j] * x[j] for j in range(len(x)))
            uh = sum(p[f"gru_U_{name}"][i, j] * h_prev[j] for j in range(dh))
            if reset is not None:
                uh *= reset[i]
            out[i] = act(wx + uh + p[f"gru_b_{name}"][i])
        return out

    z = gate("z", sig)
    r = gate("r", sig)
    n = gate("n", math.tanh, reset=r)
    h_tmp = (1 - z) * n + z * h_prev

    words = [p["word_emb"][w] for w in question]
    scores = []
    for w in words:
        pre = p["att_W_h"] @ h_tmp + p["att_W_w"] @ w + p["att_b"]
        scores.append(float(p["att_v"] @ np.tanh(pre)))
    exp = [math.exp(s - max(scores)) for s in scores]
    alpha = [e / sum(exp) for e in exp]
    context = sum(a * w for a, w in zip(alpha, words))

    entity = p["entity_emb"][e_prev]
    pre = p["proj_W"] @ np.concatenate([h_tmp, entity, context]) + p["proj_b"]
    h = np.maximum(pre, 0.0)
    logits = [float(p["relation_emb"][g] @ h) for g in range(1, params.dims.n_relations)]
    top = max(logits)
    log_z = top + math.log(sum(math.exp(l - top) for l in logits))
    return h, np.array([l - log_z for l in logits]), np.array(alpha)


class TestModelDims:
    def test_relation_must_match_hidden(self):
        with pytest.raises(ValidationError):
            ModelDims(n_words=5, n_entities=4, n_relations=4, d_relation=8, d_hidden=16)

    def test_entity_table_has_answer_slot(self, toy_dims):
        assert toy_dims.shapes()["entity_emb"] == (toy_dims.n_entities + 1, toy_dims.d_entity)
        assert toy_dims.answer_slot == toy_dims.n_entities

    def test_param_order(self, toy_dims):
        assert tuple(toy_dims.shapes()) == PARAM_ORDER


class TestInit:
    def test_deterministic(self, toy_dims):
        assert init_params(toy_dims, 3).equals(init_params(toy_dims, 3))
        assert not init_params(toy_dims, 3).equals(init_params(toy_dims, 4))

    def test_range(self, toy_dims):
        for _, tensor in init_params(toy_dims, 0).items():
            assert np.all(np.abs(tensor) <= 0.08)


class TestStep:
    def test_matches_reference(self, toy_params, toy_question):
        rng = np.random.default_rng(1)
        params = init_params(toy_params.dims, 7)
        for _ in range(5):
            h_prev = rng.uniform(-0.5, 0.5, params.dims.d_hidden)
            r_prev = int(rng.integers(params.dims.n_relations))
            e_prev = int(rng.integers(params.dims.n_entities + 1))
            h, log_probs, trace = step(params, h_prev, r_prev, e_prev, toy_question)
            ref_h, ref_lp, ref_alpha = reference_step(params, h_prev, r_prev, e_prev, toy_question)
            np.testing.assert_allclose(h, ref_h, atol=1e-12)
            np.testing.assert_allclose(log_probs, ref_lp, atol=1e-12)
            np.testing.assert_allclose(trace.alpha, ref_alpha, atol=1e-12)

    def test_distributions_normalized(self, toy_dims):
        rng = np.random.default_rng(0)
        for i in range(1000):
            params = init_params(toy_dims, i % 10)
            question = rng.integers(2, toy_dims.n_words, size=int(rng.integers(1, 8)))
            h_prev = rng.normal(size=toy_dims.d_hidden)
            _, log_probs, trace = step(
                params, h_prev, int(rng.integers(toy_dims.n_relations)),
                int(rng.integers(toy_dims.n_entities)), question,
            )
            assert abs(np.exp(log_probs).sum() - 1.0) < 1e-9
            assert abs(trace.alpha.sum() - 1.0) < 1e-9

    def test_sop_never_predicted(self, toy_params, toy_question):
        _, _, trace = step(toy_params, np.zeros(8), SOP_ID, 0, toy_question)
        assert trace.log_prob(SOP_ID) == float("-inf")
        assert set(trace.relation_distribution()) == {EOP_ID, 2, 3}

    def test_empty_question(self, toy_params):
        with pytest.raises(EmptyQuestionError):
            step(toy_params, np.zeros(8), SOP_ID, 0, ())

    def test_entity_ablation_ignores_entity(self, toy_dims, toy_question):
        dims = toy_dims.model_copy(update={"entity_in_state": False})
        params = init_params(dims, 0)
        h1, _, _ = step(params, np.zeros(8), SOP_ID, 0, toy_question)
        h2, _, _ = step(params, np.zeros(8), SOP_ID, 3, toy_question)
        np.testing.assert_array_equal(h1, h2)


class TestPathLogProb:
    def test_uniform_model(self, toy_kb, toy_dims, toy_question):
        """All-zero parameters give uniform 1/3 over {<eop>, r, s}."""
        params = zero_params(toy_dims)
        r, s = toy_kb.relation_id("r"), toy_kb.relation_id("s")
        two_hop = path_log_prob(params, toy_kb, toy_question, ReasoningPath((0, 1), (r, s)))
        assert two_hop.total == pytest.approx(3 * math.log(1 / 3) - math.log(2), abs=1e-12)
        assert two_hop.entity_terms == pytest.approx((-math.log(2),))
        one_hop = path_log_prob(params, toy_kb, toy_question, ReasoningPath((0,), (r,)))
        assert one_hop.total == pytest.approx(2 * math.log(1 / 3), abs=1e-12)
        assert joint_log_prob(params, toy_kb, toy_question, ReasoningPath((0,), (r,))) == pytest.approx(
            2 * math.log(1 / 3) - math.log(2), abs=1e-12
        )

    def test_decomposition(self, toy_kb, toy_params, toy_question):
        r, s = toy_kb.relation_id("r"), toy_kb.relation_id("s")
        result = path_log_prob(toy_params, toy_kb, toy_question, ReasoningPath((0, 2), (r, s)))
        assert result.total == pytest.approx(result.component_sum(), abs=1e-12)
        assert len(result.relation_terms) == 2
        assert len(result.trace.steps) == 3
        assert result.trace.steps[-1].e_prev == toy_params.dims.answer_slot
        assert result.total < 0

    def test_invalid_path(self, toy_kb, toy_params, toy_question):
        s = toy_kb.relation_id("s")
        with pytest.raises(InvalidPathError):
            path_log_prob(toy_params, toy_kb, toy_question, ReasoningPath((0,), (s,)))

    def test_entity_transition(self, toy_kb):
        r = toy_kb.relation_id("r")
        assert entity_transition_prob(toy_kb, 0, r, 1) == 0.5
        assert entity_transition_prob(toy_kb, 0, r, 3) == 0.0

    def test_relation_ids_are_interchangeable(self, toy_kb, toy_params, toy_question):
        relabeled = KnowledgeBase()
        for name in "abcd":
            relabeled.intern_entity(name)
        relabeled.intern_relation("s")
        for head, relation, tail in TOY_FACTS:
            relabeled.add_named_fact(head, relation, tail)
        assert relabeled.relation_id("s") == toy_kb.relation_id("r")
        params = toy_params.copy()
        params["relation_emb"][[2, 3]] = toy_params["relation_emb"][[3, 2]]

        for entities, relations in [("ab", "rs"), ("ac", "rs"), ("a", "r")]:
            results = []
            for kb, p in ((toy_kb, toy_params), (relabeled, params)):
                path = ReasoningPath(
                    tuple(kb.entity_id(e) for e in entities), tuple(kb.relation_id(r) for r in relations)
                )
                result = path_log_prob(p, kb, toy_question, path)
                by_name = [
                    [st.log_prob(EOP_ID)] + [st.log_prob(kb.relation_id(name)) for name in "rs"]
                    for st in result.trace.steps
                ]
                results.append((result.total, by_name))
            assert results[0][0] == pytest.approx(results[1][0], abs=1e-12)
            np.testing.assert_allclose(results[0][1], results[1][1], rtol=0, atol=1e-12)


class TestExhaustiveMarginal:
    def test_toy_uniform(self, toy_kb, toy_dims, toy_question):
        params = zero_params(toy_dims)
        # two paths, each 3 log(1/3) - log 2
        value = answer_log_prob_exhaustive(params, toy_kb, toy_question, 0, 3, 3)
        assert value == pytest.approx(3 * math.log(1 / 3), abs=1e-12)

    def test_unreachable(self, toy_kb, toy_params, toy_question):
        assert answer_log_prob_exhaustive(toy_params, toy_kb, toy_question, 3, 0, 3) == float("-inf")

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_term_by_term_sum(self, make_random_kb, seed):
        kb = make_random_kb(seed, n_entities=int(10 + 2 * seed), n_relations=1 + seed % 6, n_facts=40)
        dims = ModelDims(n_words=6, n_entities=kb.entity_count, n_relations=kb.relation_count,
                         d_word=4, d_entity=4, d_relation=4, d_hidden=4)
        params = init_params(dims, seed)
        question = (2, 3, 4)
        topic = seed % kb.entity_count
        for answer in range(kb.entity_count):
            paths = kb.enumerate_paths(topic, answer, 3)
            expected = float("-inf")
            for path in paths:
                terms = path_log_prob(params, kb, question, path)
                joint = (sum(terms.relation_terms) + sum(terms.entity_terms) + terms.stop_term
                         - math.log(len(kb.final_answer_set(path))))
                expected = np.logaddexp(expected, joint)
            got = answer_log_prob_exhaustive(params, kb, question, topic, answer, 3)
            if not paths:
                assert got == float("-inf")
            else:
                assert got == pytest.approx(expected, abs=1e-10)

    def test_new_path_never_lowers_marginal(self, toy_dims, toy_question):
        kb_before, kb_after = KnowledgeBase(), KnowledgeBase()
        for kb in (kb_before, kb_after):
            for head, relation, tail in TOY_FACTS:
                kb.add_named_fact(head, relation, tail)
            kb.intern_relation("t")
        kb_after.add_named_fact("a", "t", "d")
        dims = ModelDims(**{**toy_dims.model_dump(), "n_relations": kb_before.relation_count})
        params = init_params(dims, 0)
        before = answer_log_prob_exhaustive(params, kb_before, toy_question, 0, 3, 3)
        after = answer_log_prob_exhaustive(params, kb_after, toy_question, 0, 3, 3)
        assert after > before

    @pytest.mark.parametrize("seed", range(10))
    def test_marginal_monotone_in_path_set(self, make_random_kb, seed):
        kb_before, kb_after = make_random_kb(seed), make_random_kb(seed)
        head, relation = next(
            (h, r) for h in range(kb_after.entity_count) for r in kb_after.kb_relations()
            if kb_after.fanout(h, r) == 0
        )
        kb_after.add_fact(head, relation, (head + 1) % kb_after.entity_count)
        dims = ModelDims(n_words=6, n_entities=kb_before.entity_count, n_relations=kb_before.relation_count,
                         d_word=4, d_entity=4, d_relation=4, d_hidden=4)
        params = init_params(dims, seed)
        question = (2, 3, 4)
        for topic in range(kb_before.entity_count):
            for answer in range(kb_before.entity_count):
                before = answer_log_prob_exhaustive(params, kb_before, question, topic, answer, 3)
                after = answer_log_prob_exhaustive(params, kb_after, question, topic, answer, 3)
                if before == float("-inf"):
                    continue
                assert after >= before - 1e-12, (topic, answer)


# No finite-difference step may cross a ReLU kink, so checked instances keep every
# pre-activation at least this far from zero.
KINK_MARGIN = 1e-2


def central_difference(tensor, idx, loss_fn, eps):
    saved = tensor[idx]
    tensor[idx] = saved + eps
    up = loss_fn()
    tensor[idx] = saved - eps
    down = loss_fn()
    tensor[idx] = saved
    return (up - down) / (2 * eps)


def finite_difference_check(params, loss_fn, analytic, eps=1e-4, tol=1e-4):
    def rel_err(numeric, exact):
        return abs(numeric - exact) / max(1e-2, abs(numeric) + abs(exact))

    for name, tensor in params.items():
        grad = analytic[name]
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            numeric = central_difference(tensor, idx, loss_fn, eps)
            assert rel_err(numeric, grad[idx]) < tol, f"{name}{idx}: analytic {grad[idx]}, numeric {numeric}"


def relu_margin(params, kb, batch):
    """Smallest |pre-activation| of the output projection over every step of every path."""
    return min(
        float(np.min(np.abs(st.proj_pre)))
        for item in batch
        for path in item.paths
        for st in path_log_prob(params, kb, item.question, path).trace.steps
    )


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("objective", [ObjectiveVariant.MULTIPLE_MARGINAL, ObjectiveVariant.MULTIPLE_PRODUCT])
    def test_finite_differences(self, make_random_kb, seed, objective):
        kb = make_random_kb(100 + seed, n_entities=10, n_relations=5, n_facts=28)
        dims = ModelDims(n_words=7, n_entities=kb.entity_count, n_relations=kb.relation_count,
                         d_word=8, d_entity=8, d_relation=8, d_hidden=8)
        params = init_params(dims, seed)
        rng = np.random.default_rng(seed)
        for tensor in params.tensors.values():
            tensor *= 5.0
        batch = []
        for topic in range(kb.entity_count):
            for answer in range(kb.entity_count):
                paths = kb.enumerate_paths(topic, answer, 3)
                if paths and len(batch) < 3:
                    question = tuple(int(w) for w in rng.integers(1, dims.n_words, size=4))
                    item = PathBatchItem(question=question, paths=tuple(paths[:3]))
                    if relu_margin(params, kb, [item]) > KINK_MARGIN:
                        batch.append(item)
        assert batch

        loss, grads = loss_and_grad(params, kb, batch, objective)
        finite_difference_check(params, lambda: loss_and_grad(params, kb, batch, objective)[0], grads)

    def test_single_path_gradient(self, toy_kb, toy_dims, toy_question):
        r, s = toy_kb.relation_id("r"), toy_kb.relation_id("s")
        batch = [PathBatchItem(question=toy_question, paths=(ReasoningPath((0, 1), (r, s)),))]
        params = next(
            p for p in (init_params(toy_dims, seed) for seed in range(50))
            if relu_margin(p, toy_kb, batch) > KINK_MARGIN
        )
        variant = ObjectiveVariant.SINGLE_GROUND_TRUTH
        _, grads = loss_and_grad(params, toy_kb, batch, variant)
        finite_difference_check(params, lambda: loss_and_grad(params, toy_kb, batch, variant)[0], grads)

    def test_pad_row_untouched(self, toy_kb, toy_params, toy_question):
        r = toy_kb.relation_id("r")
        batch = [PathBatchItem(question=toy_question, paths=(ReasoningPath((0,), (r,)),))]
        _, grads = loss_and_grad(toy_params, toy_kb, batch, ObjectiveVariant.MULTIPLE_MARGINAL)
        assert not np.any(grads["word_emb"][0])

    def test_empty_batch(self, toy_kb, toy_params):
        with pytest.raises(ValueError):
            loss_and_grad(toy_params, toy_kb, [], ObjectiveVariant.MULTIPLE_MARGINAL)

    @pytest.mark.parametrize("objective", [ObjectiveVariant.MULTIPLE_MARGINAL, ObjectiveVariant.MULTIPLE_PRODUCT])
    def test_repeated_instance_doubles_gradient(self, toy_kb, toy_params, toy_question, objective):
        r, s = toy_kb.relation_id("r"), toy_kb.relation_id("s")
        item = PathBatchItem(
            question=toy_question, paths=(ReasoningPath((0, 1), (r, s)), ReasoningPath((0, 2), (r, s)))
        )
        single_loss, single = loss_and_grad(toy_params, toy_kb, [item], objective)
        double_loss, double = loss_and_grad(toy_params, toy_kb, [item, item], objective)
        assert double_loss == pytest.approx(2 * single_loss, rel=1e-12)
        for name, tensor in double.items():
            np.testing.assert_allclose(tensor, 2 * single[name], rtol=1e-12, atol=1e-15, err_msg=name)
