from typing import Callable

import numpy as np
import pytest

from path_reasoner.dataset import QAInstance, Vocabulary
from path_reasoner.kb_store import KnowledgeBase, ReasoningPath
from path_reasoner.path_model import ModelDims, ModelParams, init_params

TOY_QUESTION = "what is the s of the r of a"


@pytest.fixture
def toy_kb() -> KnowledgeBase:
    """a -r-> {b, c}, b -s-> d, c -s-> d: two 2-hop paths from a to d."""
    kb = KnowledgeBase()
    for head, relation, tail in [("a", "r", "b"), ("a", "r", "c"), ("b", "s", "d"), ("c", "s", "d")]:
        kb.add_named_fact(head, relation, tail)
    return kb


@pytest.fixture
def toy_vocab() -> Vocabulary:
    vocab = Vocabulary()
    vocab.encode(TOY_QUESTION)
    vocab.encode("which entity is the r of a")
    return vocab


@pytest.fixture
def toy_question(toy_vocab) -> tuple:
    return toy_vocab.encode(TOY_QUESTION)


@pytest.fixture
def toy_dims(toy_kb, toy_vocab) -> ModelDims:
    return ModelDims(
        n_words=len(toy_vocab),
        n_entities=toy_kb.entity_count,
        n_relations=toy_kb.relation_count,
        d_word=8,
        d_entity=8,
        d_relation=8,
        d_hidden=8,
    )


@pytest.fixture
def toy_params(toy_dims) -> ModelParams:
    return init_params(toy_dims, seed=0)


@pytest.fixture
def toy_instance(toy_kb, toy_question) -> QAInstance:
    a, b, d = (toy_kb.entity_id(name) for name in "abd")
    r, s = toy_kb.relation_id("r"), toy_kb.relation_id("s")
    return QAInstance(
        question_id="toy-1",
        text=TOY_QUESTION,
        question=toy_question,
        topic_entity=a,
        answers=(d,),
        gold_answers=(d,),
        annotated_path=ReasoningPath((a, b), (r, s)),
    )


@pytest.fixture
def make_random_kb() -> Callable[..., KnowledgeBase]:
    """Factory for small random KBs; self-loops and cycles included."""

    def make(seed: int, n_entities: int = 12, n_relations: int = 4, n_facts: int = 30) -> KnowledgeBase:
        rng = np.random.default_rng(seed)
        kb = KnowledgeBase()
        for i in range(n_entities):
            kb.intern_entity(f"e{i}")
        for j in range(n_relations):
            kb.intern_relation(f"p{j}")
        for _ in range(n_facts):
            head, tail = (int(x) for x in rng.integers(n_entities, size=2))
            relation = 2 + int(rng.integers(n_relations))
            kb.add_fact(head, relation, tail)
        return kb

    return make
