"""
Average F1 and set accuracy, broken down by how many reasoning paths reach the gold answers.
"""

from collections import OrderedDict
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple
import logging

from pydantic import BaseModel, Field
from tqdm import tqdm

from path_reasoner.dataset import QAInstance, Vocabulary, has_multiple_paths
from path_reasoner.inference import PredictOptions, predict, predicted_set
from path_reasoner.kb_store import KnowledgeBase
from path_reasoner.path_model import ModelParams

logger = logging.getLogger(__name__)

SINGLE_PATH = "1 path"
MULTI_PATH = ">1 path"
GROUPS = (SINGLE_PATH, MULTI_PATH)


def f1(predicted: Iterable[int], gold: Iterable[int]) -> float:
    predicted, gold = set(predicted), set(gold)
    if not gold:
        raise ValueError("Gold answer set is empty")
    hits = len(predicted & gold)
    if not predicted or not hits:
        return 0.0
    precision = hits / len(predicted)
    recall = hits / len(gold)
    return 2 * precision * recall / (precision + recall)


def set_accuracy(predicted: Iterable[int], gold: Iterable[int]) -> int:
    return int(set(predicted) == set(gold))


class GroupMetrics(BaseModel):
    count: int = 0
    f1: float = Field(default=0.0, ge=0.0, le=1.0)
    accuracy: float = Field(default=0.0, ge=0.0, le=1.0)


class MetricsReport(BaseModel):
    """Metrics over questions (expanded instances regrouped by question id)."""

    average_f1: float = Field(ge=0.0, le=1.0)
    set_accuracy: float = Field(ge=0.0, le=1.0)
    instance_count: int
    no_answer_count: int
    groups: Dict[str, GroupMetrics]

    def to_table(self) -> str:
        rows = [("all", self.instance_count, self.average_f1, self.set_accuracy)]
        rows += [(name, g.count, g.f1, g.accuracy) for name, g in self.groups.items()]
        lines = [f"{'group':<10} {'count':>6} {'F1':>8} {'accuracy':>9}"]
        for name, count, f1_score, acc in rows:
            lines.append(f"{name:<10} {count:>6} {f1_score * 100:>7.1f}% {acc * 100:>8.1f}%")
        lines.append(f"no answer: {self.no_answer_count}")
        return "\n".join(lines)


def _group_questions(instances: Sequence[QAInstance]) -> "OrderedDict[str, List[QAInstance]]":
    grouped: "OrderedDict[str, List[QAInstance]]" = OrderedDict()
    for instance in instances:
        grouped.setdefault(instance.question_id, []).append(instance)
    return grouped


def predict_question(
    params: ModelParams,
    kb: KnowledgeBase,
    group: Sequence[QAInstance],
    options: PredictOptions,
    vocab: Optional[Vocabulary] = None,
) -> List[Tuple[int, float]]:
    """Ranked answers for one question; several topic entities are merged by max score."""
    merged: Dict[int, float] = {}
    seen: Set[Tuple[Tuple[int, ...], int]] = set()
    for instance in group:
        key = (instance.question, instance.topic_entity)
        if key in seen:
            continue
        seen.add(key)
        prediction = predict(params, kb, instance.question, instance.topic_entity, options, vocab)
        for answer, score in prediction.ranked_answers:
            merged[answer] = max(merged.get(answer, score), score)
    return sorted(merged.items(), key=lambda item: (-item[1], item[0]))


def evaluate(
    params: ModelParams,
    kb: KnowledgeBase,
    instances: Sequence[QAInstance],
    options: PredictOptions,
    vocab: Optional[Vocabulary] = None,
    progress: bool = False,
) -> MetricsReport:
    """Pure in (params, kb, instances, options)."""
    questions = _group_questions(instances)
    totals = {name: [0, 0.0, 0.0] for name in GROUPS}
    f1_sum = acc_sum = 0.0
    no_answer = 0
    for group in tqdm(questions.values(), desc="evaluate", disable=not progress):
        gold: Set[int] = set()
        for instance in group:
            gold.update(instance.gold_answers)
        ranked = predict_question(params, kb, group, options, vocab)
        if not ranked:
            no_answer += 1
        predicted = predicted_set(ranked, options.tau)
        score, acc = f1(predicted, gold), set_accuracy(predicted, gold)
        multi = any(
            has_multiple_paths(kb, topic, gold, options.max_hops)
            for topic in {instance.topic_entity for instance in group}
        )
        bucket = totals[MULTI_PATH if multi else SINGLE_PATH]
        bucket[0] += 1
        bucket[1] += score
        bucket[2] += acc
        f1_sum += score
        acc_sum += acc

    n = len(questions)
    report = MetricsReport(
        average_f1=f1_sum / n if n else 0.0,
        set_accuracy=acc_sum / n if n else 0.0,
        instance_count=n,
        no_answer_count=no_answer,
        groups={
            name: GroupMetrics(
                count=count,
                f1=f1_total / count if count else 0.0,
                accuracy=acc_total / count if count else 0.0,
            )
            for name, (count, f1_total, acc_total) in totals.items()
        },
    )
    logger.info(
        f"Evaluated {n} questions: F1 {report.average_f1:.3f}, "
        f"set accuracy {report.set_accuracy:.3f}, no answer {no_answer}"
    )
    return report
