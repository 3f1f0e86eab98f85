"""
Ablation harnesses: the four path/objective variants, and one-feature-off runs of the full model.
"""

from typing import Dict, List, Optional, Sequence
import json
import logging

from pydantic import BaseModel

from path_reasoner.dataset import QAInstance, Vocabulary
from path_reasoner.evaluation import GROUPS, MetricsReport, evaluate
from path_reasoner.inference import PredictOptions
from path_reasoner.kb_store import KnowledgeBase
from path_reasoner.objectives import ObjectiveVariant
from path_reasoner.training import TrainingConfig, train

logger = logging.getLogger(__name__)

COLUMNS = GROUPS + ("all",)


class AblationRow(BaseModel):
    name: str
    f1: Dict[str, float]
    accuracy: Dict[str, float]
    report: MetricsReport

    @classmethod
    def from_report(cls, name: str, report: MetricsReport) -> "AblationRow":
        f1 = {group: report.groups[group].f1 for group in GROUPS}
        accuracy = {group: report.groups[group].accuracy for group in GROUPS}
        f1["all"] = report.average_f1
        accuracy["all"] = report.set_accuracy
        return cls(name=name, f1=f1, accuracy=accuracy, report=report)


class AblationTable(BaseModel):
    rows: List[AblationRow]

    def row(self, name: str) -> AblationRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def to_table(self) -> str:
        width = max([len("variant")] + [len(row.name) for row in self.rows])
        header = f"{'variant':<{width}} " + " ".join(f"{col + ' F1':>12}" for col in COLUMNS)
        lines = [header]
        for row in self.rows:
            cells = " ".join(f"{row.f1[col] * 100:>11.1f}%" for col in COLUMNS)
            lines.append(f"{row.name:<{width}} {cells}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


def ablate(
    train_set: Sequence[QAInstance],
    test_set: Sequence[QAInstance],
    kb: KnowledgeBase,
    vocab: Vocabulary,
    base_config: TrainingConfig,
    options: PredictOptions,
    dev_set: Optional[Sequence[QAInstance]] = None,
) -> AblationTable:
    """Train every objective variant from the same seed and evaluate each on test_set."""
    rows = []
    for variant in ObjectiveVariant:
        logger.info(f"Ablation: training {variant.value}")
        config = base_config.model_copy(update={"objective": variant})
        result = train(train_set, kb, vocab, config, dev=dev_set)
        report = evaluate(result.params, kb, test_set, options, vocab)
        rows.append(AblationRow.from_report(variant.value, report))
    return AblationTable(rows=rows)


def ablate_features(
    train_set: Sequence[QAInstance],
    test_set: Sequence[QAInstance],
    kb: KnowledgeBase,
    vocab: Vocabulary,
    base_config: TrainingConfig,
    options: PredictOptions,
    dev_set: Optional[Sequence[QAInstance]] = None,
) -> AblationTable:
    """
    The full model (entity in state, marginal prediction, inference in training, PMI),
    then the same model with one feature removed. Prediction-time features reuse the
    full model's parameters.
    """
    full_config = base_config.model_copy(update={"entity_in_state": True, "inference_in_training": True})
    full_options = options.model_copy(update={"use_pmi": True, "marginal_prediction": True})

    full = train(train_set, kb, vocab, full_config, dev=dev_set).params
    no_entity = train(
        train_set, kb, vocab, full_config.model_copy(update={"entity_in_state": False}), dev=dev_set
    ).params
    no_selection = train(
        train_set, kb, vocab, full_config.model_copy(update={"inference_in_training": False}), dev=dev_set
    ).params

    runs = [
        ("full", full, full_options),
        ("- entity_in_state", no_entity, full_options),
        ("- marginal_prediction", full, full_options.model_copy(update={"marginal_prediction": False})),
        ("- inference_in_training", no_selection, full_options),
        ("- mutual_information", full, full_options.model_copy(update={"use_pmi": False})),
    ]
    rows = []
    for name, params, run_options in runs:
        logger.info(f"Feature ablation: evaluating {name}")
        rows.append(AblationRow.from_report(name, evaluate(params, kb, test_set, run_options, vocab)))
    return AblationTable(rows=rows)
