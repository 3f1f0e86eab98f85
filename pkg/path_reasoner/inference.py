"""
Prediction: KB-constrained beam search over paths, answer marginals and PMI rescoring.

Beam hypotheses branch on concrete tail entities, so the 1/M entity term is part of
every hypothesis score. Expanding a hypothesis whose current entity is e emits one
finished path per outgoing relation of e (scored with the stop step) and, below
max_hops, one live child per (relation, tail) pair. Searches at every width up to the
requested one share their step computations, and their finished paths are merged.
"""

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple
import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from path_reasoner.dataset import UNK_ID, Vocabulary
from path_reasoner.kb_store import EOP_ID, SOP_ID, KnowledgeBase, ReasoningPath
from path_reasoner.path_model import ModelParams, StepTrace, encode_question, forward_step, initial_state

logger = logging.getLogger(__name__)

PMI_FLOOR = 1e-12


class PredictOptions(BaseModel):
    model_config = ConfigDict(frozen=True)

    beam_width: int = Field(default=10, ge=1)
    max_hops: int = Field(default=3, ge=1)
    use_pmi: bool = False
    marginal_prediction: bool = True
    tau: float = Field(default=0.5, gt=0.0, le=1.0)


@dataclass
class BeamHypothesis:
    """A partial path e_0, r_1, ..., r_k, e_k whose last entity is still to be expanded."""

    entities: Tuple[int, ...]
    relations: Tuple[int, ...]
    log_prob: float
    state: np.ndarray
    finished: bool = False

    @property
    def current_entity(self) -> int:
        return self.entities[-1]

    @property
    def hops(self) -> int:
        return len(self.relations)

    def sort_key(self) -> Tuple:
        seq: List[int] = []
        for t, entity in enumerate(self.entities):
            seq.append(entity)
            if t < len(self.relations):
                seq.append(self.relations[t])
        return (-self.log_prob, tuple(seq))


@dataclass(frozen=True)
class ScoredPath:
    path: ReasoningPath
    log_prob: float

    def sort_key(self) -> Tuple:
        return (-self.log_prob, self.path.id_sequence())


@dataclass
class AnswerDistribution:
    mass: Dict[int, float] = field(default_factory=dict)
    paths: Dict[int, List[ScoredPath]] = field(default_factory=dict)

    def ranked(self) -> List[Tuple[int, float]]:
        return sorted(self.mass.items(), key=lambda item: (-item[1], item[0]))

    def __len__(self) -> int:
        return len(self.mass)


@dataclass
class Prediction:
    """answer is None when no valid path leaves the topic entity."""

    answer: Optional[int]
    ranked_answers: List[Tuple[int, float]]
    ranked_paths: List[ScoredPath]
    use_pmi: bool = False

    @property
    def has_answer(self) -> bool:
        return self.answer is not None


class _StepCache:
    """forward_step results keyed by path prefix, shared across beam widths."""

    def __init__(self, params: ModelParams, question: Sequence[int]):
        self.params = params
        self.words, self.word_vecs = encode_question(params, question)
        self.slot = params.dims.answer_slot
        self.steps: Dict[Tuple, StepTrace] = {}
        self.stops: Dict[ReasoningPath, StepTrace] = {}

    def __call__(self, hyp: BeamHypothesis) -> StepTrace:
        key = (hyp.entities, hyp.relations)
        if key not in self.steps:
            r_prev = hyp.relations[-1] if hyp.relations else SOP_ID
            self.steps[key] = forward_step(
                self.params, hyp.state, r_prev, hyp.current_entity, self.words, self.word_vecs
            )
        return self.steps[key]

    def stop(self, path: ReasoningPath, h: np.ndarray) -> StepTrace:
        if path not in self.stops:
            self.stops[path] = forward_step(
                self.params, h, path.relations[-1], self.slot, self.words, self.word_vecs
            )
        return self.stops[path]


def _pruned_search(
    params: ModelParams,
    kb: KnowledgeBase,
    e0: int,
    width: int,
    max_hops: int,
    expand: _StepCache,
    finished: Dict[ReasoningPath, float],
) -> bool:
    """One width-limited search; adds its finished paths and reports whether any depth was truncated."""
    beam = [BeamHypothesis(entities=(e0,), relations=(), log_prob=0.0, state=initial_state(params))]
    truncated = False
    while beam:
        children: List[BeamHypothesis] = []
        for hyp in beam:
            st = expand(hyp)
            for relation in kb.outgoing_relations(hyp.current_entity):
                lp = hyp.log_prob + st.log_prob(relation)
                relations = hyp.relations + (relation,)
                path = ReasoningPath(hyp.entities, relations)
                if path not in finished:
                    finished[path] = lp + expand.stop(path, st.h).log_prob(EOP_ID)
                if len(relations) < max_hops:
                    tails = kb.lookup_tails(hyp.current_entity, relation)
                    entity_term = -math.log(len(tails))
                    for tail in tails:
                        children.append(BeamHypothesis(
                            entities=hyp.entities + (tail,),
                            relations=relations,
                            log_prob=lp + entity_term,
                            state=st.h,
                        ))
        children.sort(key=BeamHypothesis.sort_key)
        truncated = truncated or len(children) > width
        beam = children[:width]
        logger.debug(f"width {width} depth {beam[0].hops if beam else '-'}: kept {len(beam)} of {len(children)}")
    return truncated


def beam_search(
    params: ModelParams,
    kb: KnowledgeBase,
    question: Sequence[int],
    e0: int,
    beam_width: int,
    max_hops: int,
) -> List[ScoredPath]:
    """
    Finished paths found from e0, best first (ties by id sequence).

    Only relations leaving the current entity are proposed, and only their actual
    tails become next entities, so every returned path is valid in the KB.

    The result is the union of the width-w searches for w = 1..beam_width, so a
    wider beam always returns a superset of a narrower one. Widths stop growing
    once a search prunes nothing, since every wider search is then identical.
    """
    if beam_width < 1:
        raise ValueError(f"beam_width must be >= 1, got {beam_width}")
    if max_hops < 1:
        raise ValueError(f"max_hops must be >= 1, got {max_hops}")
    expand = _StepCache(params, question)
    finished: Dict[ReasoningPath, float] = {}
    for width in range(1, beam_width + 1):
        if not _pruned_search(params, kb, e0, width, max_hops, expand, finished):
            break

    results = [ScoredPath(path, lp) for path, lp in finished.items()]
    results.sort(key=ScoredPath.sort_key)
    return results


def relation_sequence_scores(results: Sequence[ScoredPath]) -> List[Tuple[Tuple[int, ...], float]]:
    """p(relation sequence | q): path probabilities summed over entity paths, ranked (ties by ids)."""
    totals: Dict[Tuple[int, ...], float] = defaultdict(float)
    for scored in results:
        totals[scored.path.relations] += math.exp(scored.log_prob)
    return sorted(totals.items(), key=lambda item: (-item[1], item[0]))


def answer_distribution(kb: KnowledgeBase, results: Sequence[ScoredPath]) -> AnswerDistribution:
    """mass(y) = sum over paths reaching y of exp(log p(path|q)) / |final answer set|."""
    dist = AnswerDistribution()
    for scored in results:
        final = kb.final_answer_set(scored.path)
        share = math.exp(scored.log_prob) / len(final)
        for answer in final:
            dist.mass[answer] = dist.mass.get(answer, 0.0) + share
            dist.paths.setdefault(answer, []).append(scored)
    return dist


def best_path_scores(kb: KnowledgeBase, results: Sequence[ScoredPath]) -> Dict[int, float]:
    """Per answer, the largest single-path joint probability exp(lp) / |final answer set|."""
    scores: Dict[int, float] = defaultdict(float)
    for scored in results:
        final = kb.final_answer_set(scored.path)
        share = math.exp(scored.log_prob) / len(final)
        for answer in final:
            scores[answer] = max(scores[answer], share)
    return dict(scores)


def pmi_rescore(mass_q: Dict[int, float], mass_e0: Dict[int, float]) -> List[Tuple[int, float]]:
    """mass_q(y) / mass_e0(y), ranked; answers missing from mass_e0 are divided by PMI_FLOOR."""
    scored = {
        answer: mass / max(mass_e0.get(answer, 0.0), PMI_FLOOR)
        for answer, mass in mass_q.items()
    }
    return sorted(scored.items(), key=lambda item: (-item[1], item[0]))


def topic_question(kb: KnowledgeBase, vocab: Vocabulary, e0: int) -> Tuple[int, ...]:
    """The question reduced to the topic entity's surface tokens."""
    tokens = vocab.encode(kb.entity_name(e0))
    return tokens or (UNK_ID,)


def _answer_scores(kb: KnowledgeBase, results: Sequence[ScoredPath], marginal: bool) -> Dict[int, float]:
    if marginal:
        return answer_distribution(kb, results).mass
    return best_path_scores(kb, results)


def predict(
    params: ModelParams,
    kb: KnowledgeBase,
    question: Sequence[int],
    e0: int,
    options: PredictOptions,
    vocab: Optional[Vocabulary] = None,
) -> Prediction:
    """
    Highest-scoring answer for (question, e0), ties broken by the smaller entity id.

    With use_pmi the scores are divided by those obtained for the topic-entity-only
    question, which needs `vocab` to encode the entity name.
    """
    results = beam_search(params, kb, question, e0, options.beam_width, options.max_hops)
    if not results:
        return Prediction(answer=None, ranked_answers=[], ranked_paths=[], use_pmi=options.use_pmi)

    scores = _answer_scores(kb, results, options.marginal_prediction)
    if options.use_pmi:
        if vocab is None:
            raise ValueError("use_pmi needs the word vocabulary to build the topic-only question")
        base = beam_search(params, kb, topic_question(kb, vocab, e0), e0, options.beam_width, options.max_hops)
        ranked = pmi_rescore(scores, _answer_scores(kb, base, options.marginal_prediction))
    else:
        ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))

    return Prediction(
        answer=ranked[0][0],
        ranked_answers=ranked,
        ranked_paths=results,
        use_pmi=options.use_pmi,
    )


def predicted_set(ranked_answers: Sequence[Tuple[int, float]], tau: float) -> Set[int]:
    """Every answer scoring at least tau times the top score."""
    if not ranked_answers:
        return set()
    top = ranked_answers[0][1]
    return {answer for answer, score in ranked_answers if score >= tau * top}


class PredictionRecord(BaseModel):
    """JSON form of a prediction, one object per query."""

    question: str
    topic_entity: str
    answer: Optional[str]
    use_pmi: bool
    ranked_answers: List[Tuple[str, float]]
    ranked_paths: List[Tuple[List[str], List[str], float]]


def prediction_record(
    kb: KnowledgeBase,
    text: str,
    e0: int,
    prediction: Prediction,
    max_paths: Optional[int] = None,
) -> PredictionRecord:
    paths = prediction.ranked_paths if max_paths is None else prediction.ranked_paths[:max_paths]
    return PredictionRecord(
        question=text,
        topic_entity=kb.entity_name(e0),
        answer=None if prediction.answer is None else kb.entity_name(prediction.answer),
        use_pmi=prediction.use_pmi,
        ranked_answers=[(kb.entity_name(e), score) for e, score in prediction.ranked_answers],
        ranked_paths=[
            (
                [kb.relation_name(r) for r in scored.path.relations],
                [kb.entity_name(e) for e in scored.path.entities],
                scored.log_prob,
            )
            for scored in paths
        ],
    )
