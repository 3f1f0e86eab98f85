"""
KB and QA dataset files, the word vocabulary, and multi-answer expansion.

KB file:      UTF-8 TSV, `head<TAB>relation<TAB>tail`, `#` lines ignored.
Dataset file: JSON lines, {"id", "question", "topic_entity", "answers", "gold_answers"?, "path"?}
              where `path` alternates entity / relation names: [e0, r1, e1, r2, ...].
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union
import json
import logging
import re

from pydantic import BaseModel, Field, ValidationError, field_validator

from path_reasoner.errors import DataFormatError, KnowledgeBaseError
from path_reasoner.kb_store import InternTable, KnowledgeBase, ReasoningPath

logger = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


def tokenize(text: str) -> List[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Word ids for question tokens. <pad> = 0 never occurs in a question; <unk> = 1."""

    def __init__(self, words: Iterable[str] = ()):
        self._table = InternTable(reserved=(PAD, UNK))
        for word in words:
            self._table.intern(word)
        self.frozen = False

    @classmethod
    def from_list(cls, words: Sequence[str]) -> "Vocabulary":
        if list(words[:2]) != [PAD, UNK]:
            raise DataFormatError("Vocabulary list must start with <pad>, <unk>")
        vocab = cls(words[2:])
        vocab.frozen = True
        return vocab

    def intern(self, word: str) -> int:
        if self.frozen:
            found = self._table.get(word)
            return UNK_ID if found is None else found
        return self._table.intern(word)

    def encode(self, text: str) -> Tuple[int, ...]:
        return tuple(self.intern(token) for token in tokenize(text))

    def words(self) -> List[str]:
        return self._table.names()

    def word(self, idx: int) -> str:
        return self._table.name_of(idx)

    def __len__(self) -> int:
        return len(self._table)


@dataclass(frozen=True)
class QAInstance:
    """
    One question/answer pair.

    `answers` is what training targets (a singleton after expansion); `gold_answers`
    is the full original answer set, used for evaluation and for k1 = base + |gold|.
    """

    question_id: str
    text: str
    question: Tuple[int, ...]
    topic_entity: int
    answers: Tuple[int, ...]
    gold_answers: Tuple[int, ...]
    annotated_path: Optional[ReasoningPath] = None


class QARecord(BaseModel):
    """Wire form of a dataset line."""

    id: Optional[str] = None
    question: str
    topic_entity: str
    answers: List[str] = Field(min_length=1)
    gold_answers: Optional[List[str]] = None
    path: Optional[List[str]] = None

    @field_validator("question")
    @classmethod
    def _non_empty_question(cls, value: str) -> str:
        if not tokenize(value):
            raise ValueError("question has no tokens")
        return value

    @field_validator("path")
    @classmethod
    def _alternating_path(cls, value: Optional[List[str]]) -> Optional[List[str]]:
        if value is not None and (len(value) < 2 or len(value) % 2):
            raise ValueError("path must alternate entity, relation and end with a relation")
        return value


@dataclass
class LoadReport:
    path: str
    loaded: int = 0
    errors: List[Tuple[int, str]] = field(default_factory=list)

    def add_error(self, line_no: int, message: str) -> None:
        self.errors.append((line_no, message))
        logger.warning(f"{self.path}:{line_no}: {message}")

    @property
    def skipped(self) -> int:
        return len(self.errors)


def _read_lines(path: Union[str, Path]) -> List[str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No such file: {path}")
    try:
        return path.read_text(encoding="utf-8").splitlines()
    except UnicodeDecodeError as e:
        raise DataFormatError(f"{path} is not UTF-8: {e}") from e


def load_kb(path: Union[str, Path], report: Optional[LoadReport] = None) -> KnowledgeBase:
    """Read a TSV fact file; names are interned in file order."""
    report = report if report is not None else LoadReport(str(path))
    kb = KnowledgeBase()
    for line_no, line in enumerate(_read_lines(path), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not all(part.strip() for part in parts):
            report.add_error(line_no, f"expected head<TAB>relation<TAB>tail, got {line!r}")
            continue
        head, relation, tail = (part.strip() for part in parts)
        try:
            kb.add_named_fact(head, relation, tail)
        except KnowledgeBaseError as e:
            report.add_error(line_no, str(e))
            continue
        report.loaded += 1
    logger.info(f"Loaded KB from {path}: {kb}")
    return kb


def save_kb(kb: KnowledgeBase, path: Union[str, Path]) -> None:
    """Write facts in insertion order, so load_kb rebuilds the same ids."""
    lines = [
        f"{kb.entity_name(h)}\t{kb.relation_name(r)}\t{kb.entity_name(t)}"
        for h, r, t in kb.facts()
    ]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def parse_path(kb: KnowledgeBase, names: Sequence[str]) -> ReasoningPath:
    entities = tuple(kb.entity_id(name) for name in names[0::2])
    relations = tuple(kb.relation_id(name) for name in names[1::2])
    path = ReasoningPath(entities, relations)
    kb.validate_path(path)
    return path


def path_names(kb: KnowledgeBase, path: ReasoningPath) -> List[str]:
    names: List[str] = []
    for entity, relation in zip(path.entities, path.relations):
        names.append(kb.entity_name(entity))
        names.append(kb.relation_name(relation))
    return names


def record_to_instance(
    record: QARecord,
    kb: KnowledgeBase,
    vocab: Vocabulary,
    default_id: str,
) -> QAInstance:
    topic = kb.entity_id(record.topic_entity)
    answers = tuple(sorted({kb.entity_id(name) for name in record.answers}))
    gold_names = record.gold_answers if record.gold_answers else record.answers
    gold = tuple(sorted({kb.entity_id(name) for name in gold_names}))
    annotated = parse_path(kb, record.path) if record.path else None
    if annotated is not None and annotated.topic_entity != topic:
        raise KnowledgeBaseError("annotated path does not start at the topic entity")
    return QAInstance(
        question_id=record.id or default_id,
        text=record.question,
        question=vocab.encode(record.question),
        topic_entity=topic,
        answers=answers,
        gold_answers=gold,
        annotated_path=annotated,
    )


def instance_to_record(instance: QAInstance, kb: KnowledgeBase) -> QARecord:
    answers = [kb.entity_name(e) for e in instance.answers]
    gold = [kb.entity_name(e) for e in instance.gold_answers]
    return QARecord(
        id=instance.question_id,
        question=instance.text,
        topic_entity=kb.entity_name(instance.topic_entity),
        answers=answers,
        gold_answers=None if gold == answers else gold,
        path=path_names(kb, instance.annotated_path) if instance.annotated_path else None,
    )


def load_dataset(
    path: Union[str, Path],
    kb: KnowledgeBase,
    vocab: Vocabulary,
    report: Optional[LoadReport] = None,
) -> List[QAInstance]:
    """
    Read a JSONL dataset against `kb`. Lines that do not parse or name unknown
    entities are skipped and reported with their line number.
    """
    report = report if report is not None else LoadReport(str(path))
    instances: List[QAInstance] = []
    for line_no, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            record = QARecord.model_validate(json.loads(line))
            instances.append(record_to_instance(record, kb, vocab, default_id=f"q{line_no}"))
        except json.JSONDecodeError as e:
            report.add_error(line_no, f"invalid JSON: {e}")
            continue
        except ValidationError as e:
            report.add_error(line_no, f"invalid record: {e.errors()[0]['msg']}")
            continue
        except KnowledgeBaseError as e:
            report.add_error(line_no, str(e))
            continue
        report.loaded += 1
    logger.info(f"Loaded {len(instances)} instances from {path} ({report.skipped} skipped)")
    return instances


def save_dataset(instances: Iterable[QAInstance], kb: KnowledgeBase, path: Union[str, Path]) -> None:
    lines = [
        instance_to_record(instance, kb).model_dump_json(exclude_none=True)
        for instance in instances
    ]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def expand_multi_answer(instances: Iterable[QAInstance]) -> List[QAInstance]:
    """One instance per answer; every copy keeps the full gold set."""
    expanded: List[QAInstance] = []
    for instance in instances:
        if len(instance.answers) == 1:
            expanded.append(instance)
            continue
        for answer in instance.answers:
            expanded.append(replace(instance, answers=(answer,)))
    return expanded


def path_counts(kb: KnowledgeBase, topic: int, answers: Iterable[int], max_hops: int) -> List[int]:
    return [len(kb.enumerate_paths(topic, answer, max_hops)) for answer in answers]


def has_multiple_paths(kb: KnowledgeBase, topic: int, answers: Iterable[int], max_hops: int) -> bool:
    """True when some answer is reachable through two or more distinct paths."""
    return any(count >= 2 for count in path_counts(kb, topic, answers, max_hops))


def count_multipath_fraction(dataset: Sequence[QAInstance], kb: KnowledgeBase, max_hops: int) -> float:
    if not dataset:
        return 0.0
    multi = sum(
        1 for instance in dataset
        if has_multiple_paths(kb, instance.topic_entity, instance.answers, max_hops)
    )
    return multi / len(dataset)


class QuestionQuery(BaseModel):
    """A question to answer: the dataset record without answers."""

    id: Optional[str] = None
    question: str
    topic_entity: str

    @field_validator("question")
    @classmethod
    def _non_empty_question(cls, value: str) -> str:
        if not tokenize(value):
            raise ValueError("question has no tokens")
        return value


def load_queries(path: Union[str, Path], report: Optional[LoadReport] = None) -> List[QuestionQuery]:
    """Read JSONL queries; dataset files work too since extra fields are ignored."""
    report = report if report is not None else LoadReport(str(path))
    queries: List[QuestionQuery] = []
    for line_no, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            query = QuestionQuery.model_validate(json.loads(line))
        except json.JSONDecodeError as e:
            report.add_error(line_no, f"invalid JSON: {e}")
            continue
        except ValidationError as e:
            report.add_error(line_no, f"invalid query: {e.errors()[0]['msg']}")
            continue
        queries.append(query if query.id else query.model_copy(update={"id": f"q{line_no}"}))
        report.loaded += 1
    return queries
