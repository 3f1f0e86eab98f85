"""
Recurrent path-scoring model.

At step t the model reads the previous relation through a GRU, attends over the
question words, mixes in the previous entity and emits a softmax over every
relation plus <eop>:

    h'_t  = GRU(h_{t-1}, e_r(r_{t-1}))
    u_tk  = v . tanh(W_h h'_t + W_w e_w(w_k) + b)
    a_t   = softmax(u_t)            c_t = sum_k a_tk e_w(w_k)
    h_t   = ReLU(P [h'_t; e_e(e_{t-1}); c_t] + p)
    p(r_t = g) = softmax_g <h_t, e_r(g)>

Gradients are computed by hand (reverse accumulation through the unrolled path).
All probability arithmetic is done in log space.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit, log_softmax, logsumexp

from path_reasoner.errors import EmptyQuestionError
from path_reasoner.kb_store import EOP_ID, SOP_ID, KnowledgeBase, ReasoningPath
from path_reasoner.objectives import ObjectiveVariant, PathBatchItem, instance_loss

logger = logging.getLogger(__name__)

INIT_SCALE = 0.08
NEG_INF = float("-inf")

PARAM_ORDER = (
    "word_emb",
    "entity_emb",
    "relation_emb",
    "gru_W_z", "gru_U_z", "gru_b_z",
    "gru_W_r", "gru_U_r", "gru_b_r",
    "gru_W_n", "gru_U_n", "gru_b_n",
    "att_W_h", "att_W_w", "att_b", "att_v",
    "proj_W", "proj_b",
)


class ModelDims(BaseModel):
    """Embedding sizes and vocabulary sizes. n_relations counts <sop> and <eop>."""

    model_config = ConfigDict(frozen=True)

    n_words: int = Field(gt=0)
    n_entities: int = Field(gt=0)
    n_relations: int = Field(gt=2)
    d_word: int = Field(default=32, gt=0)
    d_entity: int = Field(default=32, gt=0)
    d_relation: int = Field(default=32, gt=0)
    d_hidden: int = Field(default=32, gt=0)
    entity_in_state: bool = True

    @model_validator(mode="after")
    def _relation_matches_hidden(self):
        if self.d_relation != self.d_hidden:
            raise ValueError(
                f"d_relation ({self.d_relation}) must equal d_hidden ({self.d_hidden}): "
                "relation logits are dot products with the hidden state"
            )
        return self

    @property
    def answer_slot(self) -> int:
        """Entity-embedding row fed to the stop step in place of the unknown answer entity."""
        return self.n_entities

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        dh, dw, de, dr = self.d_hidden, self.d_word, self.d_entity, self.d_relation
        gate = {f"gru_W_{g}": (dh, dr) for g in "zrn"}
        gate.update({f"gru_U_{g}": (dh, dh) for g in "zrn"})
        gate.update({f"gru_b_{g}": (dh,) for g in "zrn"})
        shapes = {
            "word_emb": (self.n_words, dw),
            "entity_emb": (self.n_entities + 1, de),
            "relation_emb": (self.n_relations, dr),
            "att_W_h": (dh, dh),
            "att_W_w": (dh, dw),
            "att_b": (dh,),
            "att_v": (dh,),
            "proj_W": (dh, dh + de + dw),
            "proj_b": (dh,),
            **gate,
        }
        return {name: shapes[name] for name in PARAM_ORDER}


class ModelParams:
    """Named float64 tensors in PARAM_ORDER. Also used as the gradient structure."""

    def __init__(self, dims: ModelDims, tensors: Dict[str, np.ndarray]):
        expected = dims.shapes()
        missing = set(expected) - set(tensors)
        if missing:
            raise ValueError(f"Missing tensors: {sorted(missing)}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"Tensor {name} has shape {tensors[name].shape}, expected {shape}")
        self.dims = dims
        self.tensors = {name: np.asarray(tensors[name], dtype=np.float64) for name in PARAM_ORDER}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name in PARAM_ORDER:
            yield name, self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {name: t.copy() for name, t in self.items()})

    def zeros_like(self) -> "ModelParams":
        return zero_params(self.dims)

    def add_(self, other: "ModelParams", scale: float = 1.0) -> "ModelParams":
        for name, tensor in self.items():
            tensor += scale * other.tensors[name]
        return self

    def scale_(self, factor: float) -> "ModelParams":
        for _, tensor in self.items():
            tensor *= factor
        return self

    def global_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(t * t)) for _, t in self.items()))

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(t))) for _, t in self.items())

    def equals(self, other: "ModelParams") -> bool:
        return self.dims == other.dims and all(
            np.array_equal(t, other.tensors[name]) for name, t in self.items()
        )


Gradients = ModelParams


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Uniform[-0.08, 0.08] initialization, deterministic in (dims, seed)."""
    rng = np.random.default_rng(seed)
    tensors = {
        name: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        for name, shape in dims.shapes().items()
    }
    return ModelParams(dims, tensors)


def zero_params(dims: ModelDims) -> ModelParams:
    return ModelParams(dims, {name: np.zeros(shape) for name, shape in dims.shapes().items()})


@dataclass
class StepTrace:
    """Intermediate quantities of one recurrence step, kept for backprop and inspection."""

    r_prev: int
    e_prev: int
    words: np.ndarray
    h_prev: np.ndarray
    x: np.ndarray
    z: np.ndarray
    reset: np.ndarray
    u_n_h: np.ndarray
    n: np.ndarray
    h_tmp: np.ndarray
    word_vecs: np.ndarray
    att_hidden: np.ndarray
    scores: np.ndarray
    alpha: np.ndarray
    context: np.ndarray
    proj_in: np.ndarray
    proj_pre: np.ndarray
    h: np.ndarray
    log_probs: np.ndarray
    target: Optional[int] = None

    def log_prob(self, relation: int) -> float:
        """log p(relation | history); <sop> is never predicted."""
        if relation == SOP_ID:
            return NEG_INF
        return float(self.log_probs[relation - 1])

    def relation_distribution(self) -> Dict[int, float]:
        return {rel + 1: float(math.exp(lp)) for rel, lp in enumerate(self.log_probs)}


@dataclass
class ForwardTrace:
    path: ReasoningPath
    steps: List[StepTrace] = field(default_factory=list)


@dataclass
class PathLogProb:
    """log p(path | q) and its chain-rule decomposition."""

    total: float
    relation_terms: Tuple[float, ...]
    entity_terms: Tuple[float, ...]
    stop_term: float
    trace: Optional[ForwardTrace] = None

    def component_sum(self) -> float:
        return sum(self.relation_terms) + sum(self.entity_terms) + self.stop_term


def encode_question(params: ModelParams, question: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    words = np.asarray(question, dtype=np.int64)
    if words.size == 0:
        raise EmptyQuestionError("Question has no tokens")
    return words, params["word_emb"][words]


def forward_step(
    params: ModelParams,
    h_prev: np.ndarray,
    r_prev: int,
    e_prev: int,
    words: np.ndarray,
    word_vecs: np.ndarray,
) -> StepTrace:
    p = params.tensors
    x = p["relation_emb"][r_prev]

    z = expit(p["gru_W_z"] @ x + p["gru_U_z"] @ h_prev + p["gru_b_z"])
    reset = expit(p["gru_W_r"] @ x + p["gru_U_r"] @ h_prev + p["gru_b_r"])
    u_n_h = p["gru_U_n"] @ h_prev
    n = np.tanh(p["gru_W_n"] @ x + reset * u_n_h + p["gru_b_n"])
    h_tmp = (1.0 - z) * n + z * h_prev

    att_hidden = np.tanh(h_tmp @ p["att_W_h"].T + word_vecs @ p["att_W_w"].T + p["att_b"])
    scores = att_hidden @ p["att_v"]
    alpha = np.exp(scores - logsumexp(scores))
    context = alpha @ word_vecs

    if params.dims.entity_in_state:
        entity_vec = p["entity_emb"][e_prev]
    else:
        entity_vec = np.zeros(params.dims.d_entity)
    proj_in = np.concatenate([h_tmp, entity_vec, context])
    proj_pre = p["proj_W"] @ proj_in + p["proj_b"]
    h = np.maximum(proj_pre, 0.0)

    logits = p["relation_emb"][1:] @ h
    return StepTrace(
        r_prev=r_prev,
        e_prev=e_prev,
        words=words,
        h_prev=h_prev,
        x=x,
        z=z,
        reset=reset,
        u_n_h=u_n_h,
        n=n,
        h_tmp=h_tmp,
        word_vecs=word_vecs,
        att_hidden=att_hidden,
        scores=scores,
        alpha=alpha,
        context=context,
        proj_in=proj_in,
        proj_pre=proj_pre,
        h=h,
        log_probs=log_softmax(logits),
    )


def initial_state(params: ModelParams) -> np.ndarray:
    return np.zeros(params.dims.d_hidden)


def step(
    params: ModelParams,
    h_prev: np.ndarray,
    r_prev: int,
    e_prev: int,
    question: Sequence[int],
) -> Tuple[np.ndarray, np.ndarray, StepTrace]:
    """
    One recurrence step.

    Returns the new hidden state, the log-distribution over relation ids 1..R-1
    (index 0 is <eop>) and the step trace.
    """
    words, word_vecs = encode_question(params, question)
    trace = forward_step(params, np.asarray(h_prev, dtype=np.float64), r_prev, e_prev, words, word_vecs)
    return trace.h, trace.log_probs, trace


def entity_transition_prob(kb: KnowledgeBase, e_prev: int, relation: int, e_next: int) -> float:
    """Uniform 1/M over the M tails of (e_prev, relation); 0 for anything else."""
    tails = kb.lookup_tails(e_prev, relation)
    if e_next in tails:
        return 1.0 / len(tails)
    return 0.0


def path_log_prob(
    params: ModelParams,
    kb: KnowledgeBase,
    question: Sequence[int],
    path: ReasoningPath,
    validate: bool = True,
) -> PathLogProb:
    """
    log p(path | q) = sum_t log p(r_t|.) + sum_{t<T} log(1/M_t) + log p(<eop>|.)

    The stop term comes from one more step fed with r_T and the answer slot.
    """
    if validate:
        kb.validate_path(path)
    words, word_vecs = encode_question(params, question)
    trace = ForwardTrace(path=path)
    h = initial_state(params)
    relation_terms: List[float] = []
    for t in range(path.hops + 1):
        r_prev = SOP_ID if t == 0 else path.relations[t - 1]
        e_prev = path.entities[t] if t < path.hops else params.dims.answer_slot
        step_trace = forward_step(params, h, r_prev, e_prev, words, word_vecs)
        step_trace.target = path.relations[t] if t < path.hops else EOP_ID
        trace.steps.append(step_trace)
        if t < path.hops:
            relation_terms.append(step_trace.log_prob(step_trace.target))
        h = step_trace.h

    entity_terms = tuple(
        -math.log(kb.fanout(path.entities[t - 1], path.relations[t - 1]))
        for t in range(1, path.hops)
    )
    stop_term = trace.steps[-1].log_prob(EOP_ID)
    total = sum(relation_terms) + sum(entity_terms) + stop_term
    return PathLogProb(
        total=total,
        relation_terms=tuple(relation_terms),
        entity_terms=entity_terms,
        stop_term=stop_term,
        trace=trace,
    )


def joint_log_prob(params: ModelParams, kb: KnowledgeBase, question: Sequence[int], path: ReasoningPath) -> float:
    """log[p(y|p,q) p(p|q)] for any y in the path's final answer set."""
    final = kb.final_answer_set(path)
    return path_log_prob(params, kb, question, path).total - math.log(len(final))


def answer_log_prob_exhaustive(
    params: ModelParams,
    kb: KnowledgeBase,
    question: Sequence[int],
    topic: int,
    answer: int,
    max_hops: int,
) -> float:
    """log p(y|q) summed over every valid path to y; -inf when y is unreachable."""
    paths = kb.enumerate_paths(topic, answer, max_hops)
    if not paths:
        return NEG_INF
    joints = [
        path_log_prob(params, kb, question, path, validate=False).total
        - math.log(len(kb.final_answer_set(path)))
        for path in paths
    ]
    return float(logsumexp(joints))


def _backward_path(params: ModelParams, trace: ForwardTrace, coef: float, grads: ModelParams) -> None:
    """Add coef * d(log p(path|q)) / d(params) into grads."""
    p, g = params.tensors, grads.tensors
    dims = params.dims
    dh, de = dims.d_hidden, dims.d_entity
    dh_next = np.zeros(dh)
    for st in reversed(trace.steps):
        probs = np.exp(st.log_probs)
        dlogits = -coef * probs
        dlogits[st.target - 1] += coef

        g["relation_emb"][1:] += np.outer(dlogits, st.h)
        dh_total = p["relation_emb"][1:].T @ dlogits + dh_next

        dpre = dh_total * (st.proj_pre > 0.0)
        g["proj_W"] += np.outer(dpre, st.proj_in)
        g["proj_b"] += dpre
        dproj_in = p["proj_W"].T @ dpre
        dh_tmp = dproj_in[:dh].copy()
        if dims.entity_in_state:
            g["entity_emb"][st.e_prev] += dproj_in[dh:dh + de]
        dcontext = dproj_in[dh + de:]

        dalpha = st.word_vecs @ dcontext
        dword_vecs = np.outer(st.alpha, dcontext)
        dscores = st.alpha * (dalpha - st.alpha @ dalpha)
        g["att_v"] += st.att_hidden.T @ dscores
        datt = np.outer(dscores, p["att_v"]) * (1.0 - st.att_hidden ** 2)
        datt_sum = datt.sum(axis=0)
        g["att_W_h"] += np.outer(datt_sum, st.h_tmp)
        g["att_b"] += datt_sum
        dh_tmp += p["att_W_h"].T @ datt_sum
        g["att_W_w"] += datt.T @ st.word_vecs
        dword_vecs += datt @ p["att_W_w"]
        np.add.at(g["word_emb"], st.words, dword_vecs)

        dz = dh_tmp * (st.h_prev - st.n)
        dn_pre = dh_tmp * (1.0 - st.z) * (1.0 - st.n ** 2)
        dh_prev = dh_tmp * st.z
        g["gru_W_n"] += np.outer(dn_pre, st.x)
        g["gru_b_n"] += dn_pre
        dx = p["gru_W_n"].T @ dn_pre
        dreset_pre = dn_pre * st.u_n_h * st.reset * (1.0 - st.reset)
        du_n_h = dn_pre * st.reset
        g["gru_U_n"] += np.outer(du_n_h, st.h_prev)
        dh_prev += p["gru_U_n"].T @ du_n_h

        dz_pre = dz * st.z * (1.0 - st.z)
        for gate, dgate in (("z", dz_pre), ("r", dreset_pre)):
            g[f"gru_W_{gate}"] += np.outer(dgate, st.x)
            g[f"gru_U_{gate}"] += np.outer(dgate, st.h_prev)
            g[f"gru_b_{gate}"] += dgate
            dx += p[f"gru_W_{gate}"].T @ dgate
            dh_prev += p[f"gru_U_{gate}"].T @ dgate

        g["relation_emb"][st.r_prev] += dx
        dh_next = dh_prev


def loss_and_grad(
    params: ModelParams,
    kb: KnowledgeBase,
    batch: Sequence[PathBatchItem],
    objective: ObjectiveVariant,
) -> Tuple[float, Gradients]:
    """Sum over the batch of the negated objective, and its exact gradient."""
    if not batch:
        raise ValueError("Batch is empty")
    grads = zero_params(params.dims)
    total = 0.0
    for item in batch:
        scored = [path_log_prob(params, kb, item.question, path) for path in item.paths]
        joints = np.array([
            s.total - math.log(len(kb.final_answer_set(path)))
            for s, path in zip(scored, item.paths)
        ])
        loss, dloss = instance_loss(joints, objective)
        total += loss
        for s, coef in zip(scored, dloss):
            _backward_path(params, s.trace, float(coef), grads)
    return total, grads


def grad(
    params: ModelParams,
    kb: KnowledgeBase,
    batch: Sequence[PathBatchItem],
    objective: ObjectiveVariant,
) -> Gradients:
    return loss_and_grad(params, kb, batch, objective)[1]
