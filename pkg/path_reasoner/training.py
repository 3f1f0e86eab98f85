"""
Training over latent reasoning paths.

For every instance a candidate set P is built once with DFS and last-hop fanout
filtering. Each batch then re-scores P with the current parameters and keeps the top
k2 share ("inference in training") before the chosen objective and its gradient are
computed. Updates are plain gradient descent with global-norm clipping.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from tqdm import tqdm

from path_reasoner.dataset import QAInstance, Vocabulary
from path_reasoner.errors import AnnotationError, DataFormatError, TrainingDivergedError
from path_reasoner.evaluation import evaluate
from path_reasoner.inference import PredictOptions
from path_reasoner.kb_store import KnowledgeBase, ReasoningPath
from path_reasoner.objectives import ObjectiveVariant, PathBatchItem, instance_loss
from path_reasoner.path_model import ModelDims, ModelParams, init_params, loss_and_grad, path_log_prob

logger = logging.getLogger(__name__)


class TrainingConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_hops: int = Field(default=3, ge=1)
    k1_base: int = Field(default=15, ge=0)
    k2_fraction: float = Field(default=0.5, gt=0.0, le=1.0)
    learning_rate: float = Field(default=0.1, gt=0.0)
    batch_size: int = Field(default=16, gt=0)
    epochs: int = Field(default=20, ge=0)
    seed: int = 0
    objective: ObjectiveVariant = ObjectiveVariant.MULTIPLE_MARGINAL
    clip_norm: float = Field(default=5.0, gt=0.0)
    warm_start_ground_truth: bool = False
    inference_in_training: bool = True
    include_annotated_paths: bool = False
    d_word: int = Field(default=32, gt=0)
    d_entity: int = Field(default=32, gt=0)
    d_relation: int = Field(default=32, gt=0)
    d_hidden: int = Field(default=32, gt=0)
    entity_in_state: bool = True
    dev_metrics: bool = True
    tau: float = Field(default=0.5, gt=0.0, le=1.0)
    beam_width: int = Field(default=10, ge=1)

    @field_validator("objective", mode="before")
    @classmethod
    def _parse_objective(cls, value):
        return ObjectiveVariant.parse(value)

    @model_validator(mode="after")
    def _relation_matches_hidden(self):
        if self.d_relation != self.d_hidden:
            raise ValueError(f"d_relation ({self.d_relation}) must equal d_hidden ({self.d_hidden})")
        return self

    def model_dims(self, kb: KnowledgeBase, n_words: int) -> ModelDims:
        if not kb.kb_relations():
            raise DataFormatError("KB has no relations")
        try:
            return ModelDims(
                n_words=n_words,
                n_entities=kb.entity_count,
                n_relations=kb.relation_count,
                d_word=self.d_word,
                d_entity=self.d_entity,
                d_relation=self.d_relation,
                d_hidden=self.d_hidden,
                entity_in_state=self.entity_in_state,
            )
        except ValidationError as e:
            raise DataFormatError(f"Cannot size the model for this KB and vocabulary: {e}") from e

    def predict_options(self) -> PredictOptions:
        return PredictOptions(beam_width=self.beam_width, max_hops=self.max_hops, tau=self.tau)


@dataclass
class CandidateSet:
    """Filtered candidate paths per instance index; instances with none are excluded."""

    paths: Dict[int, List[ReasoningPath]] = field(default_factory=dict)
    k1: Dict[int, int] = field(default_factory=dict)
    excluded: List[int] = field(default_factory=list)

    @property
    def usable(self) -> List[int]:
        return sorted(self.paths)

    def __len__(self) -> int:
        return len(self.paths)


def effective_k1(config: TrainingConfig, instance: QAInstance) -> int:
    return config.k1_base + len(instance.gold_answers)


def build_candidates(dataset: Sequence[QAInstance], kb: KnowledgeBase, config: TrainingConfig) -> CandidateSet:
    candidates = CandidateSet()
    for n, instance in enumerate(dataset):
        k1 = effective_k1(config, instance)
        found: Dict[Tuple[int, ...], ReasoningPath] = {}
        for answer in instance.answers:
            for path in kb.enumerate_paths(instance.topic_entity, answer, config.max_hops):
                found.setdefault(path.id_sequence(), path)
        annotated = instance.annotated_path
        if config.include_annotated_paths and annotated is not None:
            if set(instance.answers) & set(kb.final_answer_set(annotated)):
                found.setdefault(annotated.id_sequence(), annotated)
        paths = kb.filter_paths_by_fanout([found[key] for key in sorted(found)], k1)
        logger.debug(f"instance {instance.question_id}: {len(found)} paths, {len(paths)} after k1={k1}")
        if not paths:
            candidates.excluded.append(n)
            continue
        candidates.paths[n] = paths
        candidates.k1[n] = k1
    if candidates.excluded:
        logger.warning(f"{len(candidates.excluded)} of {len(dataset)} instances have no candidate path and are excluded")
    return candidates


def select_top_paths(
    params: ModelParams,
    kb: KnowledgeBase,
    question: Sequence[int],
    paths: Sequence[ReasoningPath],
    k2_fraction: float,
) -> List[ReasoningPath]:
    """The ceil(k2_fraction * |P|) most probable paths under the current model, at least one."""
    if not paths:
        raise ValueError("Cannot select from an empty path set")
    if not 0.0 < k2_fraction <= 1.0:
        raise ValueError(f"k2_fraction must be in (0, 1], got {k2_fraction}")
    k = max(1, math.ceil(k2_fraction * len(paths)))
    scored = [
        (-path_log_prob(params, kb, question, path, validate=False).total, path.id_sequence(), path)
        for path in paths
    ]
    scored.sort(key=lambda item: (item[0], item[1]))
    return [path for _, _, path in scored[:k]]


def ground_truth_path(kb: KnowledgeBase, instance: QAInstance) -> ReasoningPath:
    """
    The annotated path, re-anchored on the instance's answer.

    After multi-answer expansion the annotated intermediate entities may lead to a
    different answer; the first enumerated path with the same relation sequence that
    reaches this instance's answer replaces it then.
    """
    path = instance.annotated_path
    if path is None:
        raise AnnotationError(f"Instance {instance.question_id} has no annotated path")
    answers = set(instance.answers)
    if answers & set(kb.final_answer_set(path)):
        return path
    for answer in sorted(answers):
        for candidate in kb.enumerate_paths(instance.topic_entity, answer, path.hops):
            if candidate.relations == path.relations:
                return candidate
    raise AnnotationError(
        f"Annotated path of {instance.question_id} does not reach any of its answers"
    )


def batch_loss(
    params: ModelParams,
    kb: KnowledgeBase,
    batch: Sequence[PathBatchItem],
    variant: ObjectiveVariant,
) -> float:
    """Negated objective summed over the batch, forward pass only."""
    total = 0.0
    for item in batch:
        joints = np.array([
            path_log_prob(params, kb, item.question, path, validate=False).total
            - math.log(len(kb.final_answer_set(path)))
            for path in item.paths
        ])
        total += instance_loss(joints, variant)[0]
    return total


class EpochReport(BaseModel):
    epoch: int
    objective: ObjectiveVariant
    train_loss: float
    dev_loss: Optional[float] = None
    dev_f1: Optional[float] = None
    dev_accuracy: Optional[float] = None


class TrainingReport(BaseModel):
    instances: int
    excluded: int
    candidate_paths: int
    epochs: List[EpochReport] = Field(default_factory=list)


@dataclass
class TrainingResult:
    params: ModelParams
    report: TrainingReport


class Trainer:
    """Holds the per-run state: candidate sets, the fixed single-path choices, the RNGs."""

    def __init__(
        self,
        dataset: Sequence[QAInstance],
        kb: KnowledgeBase,
        vocab: Vocabulary,
        config: TrainingConfig,
        dev: Optional[Sequence[QAInstance]] = None,
    ):
        self.dataset = list(dataset)
        self.kb = kb
        self.vocab = vocab
        self.config = config
        self.dev = list(dev or [])
        self.candidates = build_candidates(self.dataset, kb, config)
        self.dev_candidates = build_candidates(self.dev, kb, config) if self.dev else None
        self.shuffle_rng = np.random.default_rng([config.seed, 1])
        self.fixed_paths: Dict[int, ReasoningPath] = {}
        self._choose_fixed_paths()

    def _choose_fixed_paths(self) -> None:
        """Single-path variants train on one path per instance, chosen once before training."""
        config = self.config
        if config.objective is ObjectiveVariant.SINGLE_RANDOM:
            rng = np.random.default_rng([config.seed, 2])
            for n in self.candidates.usable:
                paths = self.candidates.paths[n]
                self.fixed_paths[n] = paths[int(rng.integers(len(paths)))]
        elif config.objective is ObjectiveVariant.SINGLE_GROUND_TRUTH or config.warm_start_ground_truth:
            for n in self.candidates.usable:
                self.fixed_paths[n] = ground_truth_path(self.kb, self.dataset[n])

    def _ground_truth(self, n: int) -> ReasoningPath:
        if n not in self.fixed_paths:
            self.fixed_paths[n] = ground_truth_path(self.kb, self.dataset[n])
        return self.fixed_paths[n]

    def objective_for(self, epoch: int) -> ObjectiveVariant:
        if epoch == 0 and self.config.warm_start_ground_truth:
            return ObjectiveVariant.SINGLE_GROUND_TRUTH
        return self.config.objective

    def batch_items(self, params: ModelParams, indices: Sequence[int], objective: ObjectiveVariant) -> List[PathBatchItem]:
        items = []
        for n in indices:
            question = self.dataset[n].question
            if objective is ObjectiveVariant.SINGLE_GROUND_TRUTH:
                paths = [self._ground_truth(n)]
            elif objective is ObjectiveVariant.SINGLE_RANDOM:
                paths = [self.fixed_paths[n]]
            elif self.config.inference_in_training:
                paths = select_top_paths(params, self.kb, question, self.candidates.paths[n], self.config.k2_fraction)
            else:
                paths = self.candidates.paths[n]
            items.append(PathBatchItem(question=question, paths=tuple(paths)))
        return items

    def update(self, params: ModelParams, batch: Sequence[PathBatchItem], objective: ObjectiveVariant) -> float:
        loss, grads = loss_and_grad(params, self.kb, batch, objective)
        if not math.isfinite(loss) or not grads.is_finite():
            raise TrainingDivergedError(f"Non-finite loss ({loss}) or gradient with objective {objective.value}")
        norm = grads.global_norm()
        clip = self.config.clip_norm
        if norm > 10 * clip:
            logger.warning(f"Gradient norm {norm:.2f} clipped to {clip}")
        if norm > clip:
            grads.scale_(clip / norm)
        params.add_(grads, -self.config.learning_rate)
        logger.debug(f"batch loss {loss:.4f}, gradient norm {norm:.4f}")
        return loss

    def dev_loss(self, params: ModelParams) -> Optional[float]:
        """Mean multiple_marginal loss over every dev candidate path."""
        if not self.dev_candidates:
            return None
        items = [
            PathBatchItem(question=self.dev[n].question, paths=tuple(self.dev_candidates.paths[n]))
            for n in self.dev_candidates.usable
        ]
        return batch_loss(params, self.kb, items, ObjectiveVariant.MULTIPLE_MARGINAL) / len(items)

    def run(self, progress: bool = False) -> TrainingResult:
        config = self.config
        dims = config.model_dims(self.kb, len(self.vocab))
        params = init_params(dims, config.seed)
        usable = self.candidates.usable
        report = TrainingReport(
            instances=len(self.dataset),
            excluded=len(self.candidates.excluded),
            candidate_paths=sum(len(p) for p in self.candidates.paths.values()),
        )
        if config.epochs and not usable:
            raise DataFormatError("No training instance has a candidate path")

        for epoch in tqdm(range(config.epochs), desc="epochs", disable=not progress):
            objective = self.objective_for(epoch)
            order = [usable[int(i)] for i in self.shuffle_rng.permutation(len(usable))]
            total = 0.0
            for start in range(0, len(order), config.batch_size):
                indices = order[start:start + config.batch_size]
                total += self.update(params, self.batch_items(params, indices, objective), objective)

            epoch_report = EpochReport(epoch=epoch, objective=objective, train_loss=total / len(usable))
            epoch_report.dev_loss = self.dev_loss(params)
            if config.dev_metrics and self.dev:
                metrics = evaluate(params, self.kb, self.dev, config.predict_options(), self.vocab)
                epoch_report.dev_f1 = metrics.average_f1
                epoch_report.dev_accuracy = metrics.set_accuracy
            report.epochs.append(epoch_report)
            logger.info(
                f"epoch {epoch}: {objective.value} train loss {epoch_report.train_loss:.4f}"
                + (f", dev loss {epoch_report.dev_loss:.4f}" if epoch_report.dev_loss is not None else "")
                + (f", dev F1 {epoch_report.dev_f1:.3f}, dev accuracy {epoch_report.dev_accuracy:.3f}"
                   if epoch_report.dev_f1 is not None else "")
                + f", excluded {report.excluded}"
            )
        return TrainingResult(params=params, report=report)


def train(
    dataset: Sequence[QAInstance],
    kb: KnowledgeBase,
    vocab: Vocabulary,
    config: TrainingConfig,
    dev: Optional[Sequence[QAInstance]] = None,
    progress: bool = False,
) -> TrainingResult:
    """Deterministic in (dataset, kb, vocab size, config, dev)."""
    return Trainer(dataset, kb, vocab, config, dev).run(progress=progress)
