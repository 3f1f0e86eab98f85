"""
In-memory knowledge base: interned entities and relations, an indexed fact set,
bounded depth-first path enumeration and last-hop fanout filtering.

The KB is built by a single writer; once loading is done it is treated as
immutable and may be shared by concurrent readers.
"""

from bisect import bisect_left, insort
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple
import logging

from path_reasoner.errors import InvalidPathError, KnowledgeBaseError

logger = logging.getLogger(__name__)

SOP = "<sop>"
EOP = "<eop>"
SOP_ID = 0
EOP_ID = 1

Fact = Tuple[int, int, int]


class InternTable:
    """Dense string <-> id table. Interning the same name twice returns the same id."""

    def __init__(self, reserved: Iterable[str] = ()):
        self._ids: Dict[str, int] = {}
        self._names: List[str] = []
        for name in reserved:
            self.intern(name)

    def intern(self, name: str) -> int:
        if not name:
            raise KnowledgeBaseError("Cannot intern an empty name")
        existing = self._ids.get(name)
        if existing is not None:
            return existing
        new_id = len(self._names)
        self._ids[name] = new_id
        self._names.append(name)
        return new_id

    def get(self, name: str) -> Optional[int]:
        return self._ids.get(name)

    def id_of(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise KnowledgeBaseError(f"Unknown name: {name!r}") from None

    def name_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._names):
            raise KnowledgeBaseError(f"Id {idx} out of range [0, {len(self._names)})")
        return self._names[idx]

    def names(self) -> List[str]:
        return list(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def __len__(self) -> int:
        return len(self._names)


@dataclass(frozen=True)
class ReasoningPath:
    """
    A path (e_0, r_1, e_1, ..., e_{T-1}, r_T).

    There are as many entities as relations: the answer entity e_T is not part of
    the path, it is any member of the tail set of the last (entity, relation) pair.
    """

    entities: Tuple[int, ...]
    relations: Tuple[int, ...]

    def __post_init__(self):
        if not self.relations or len(self.entities) != len(self.relations):
            raise InvalidPathError(
                f"Path needs T >= 1 relations and as many entities, got "
                f"{len(self.entities)} entities and {len(self.relations)} relations"
            )

    @property
    def hops(self) -> int:
        return len(self.relations)

    @property
    def topic_entity(self) -> int:
        return self.entities[0]

    def id_sequence(self) -> Tuple[int, ...]:
        """Interleaved (e_0, r_1, e_1, r_2, ...) ids; the canonical ordering key."""
        seq: List[int] = []
        for entity, relation in zip(self.entities, self.relations):
            seq.append(entity)
            seq.append(relation)
        return tuple(seq)

    def extend(self, relation: int, entity: int) -> "ReasoningPath":
        """Path one hop longer: the current last relation reached `entity`, then `relation`."""
        return ReasoningPath(self.entities + (entity,), self.relations + (relation,))


class KnowledgeBase:
    """Fact store with (head, relation) -> tails and head -> relations indexes."""

    def __init__(self):
        self.entities = InternTable()
        self.relations = InternTable(reserved=(SOP, EOP))
        self._facts: Set[Fact] = set()
        self._fact_order: List[Fact] = []
        self._tails: Dict[Tuple[int, int], List[int]] = {}
        self._out_relations: Dict[int, List[int]] = {}
        self._tail_views: Dict[Tuple[int, int], Tuple[int, ...]] = {}

    # -- interning -----------------------------------------------------------

    def intern_entity(self, name: str) -> int:
        return self.entities.intern(name)

    def intern_relation(self, name: str) -> int:
        if name in (SOP, EOP):
            return self.relations.id_of(name)
        return self.relations.intern(name)

    def entity_id(self, name: str) -> int:
        return self.entities.id_of(name)

    def relation_id(self, name: str) -> int:
        return self.relations.id_of(name)

    def entity_name(self, entity: int) -> str:
        return self.entities.name_of(entity)

    def relation_name(self, relation: int) -> str:
        return self.relations.name_of(relation)

    @property
    def entity_count(self) -> int:
        return len(self.entities)

    @property
    def relation_count(self) -> int:
        """Number of relation ids, <sop> and <eop> included."""
        return len(self.relations)

    @property
    def fact_count(self) -> int:
        return len(self._facts)

    def kb_relations(self) -> range:
        """Ids of the relations that may occur in facts."""
        return range(EOP_ID + 1, self.relation_count)

    # -- facts -----------------------------------------------------------------

    def _check_entity(self, entity: int) -> None:
        if not 0 <= entity < self.entity_count:
            raise KnowledgeBaseError(f"Entity id {entity} out of range [0, {self.entity_count})")

    def _check_relation(self, relation: int) -> None:
        if not 0 <= relation < self.relation_count:
            raise KnowledgeBaseError(f"Relation id {relation} out of range [0, {self.relation_count})")

    def add_fact(self, head: int, relation: int, tail: int) -> None:
        self._check_entity(head)
        self._check_entity(tail)
        self._check_relation(relation)
        if relation in (SOP_ID, EOP_ID):
            raise KnowledgeBaseError(
                f"Pseudo-relation {self.relation_name(relation)} cannot appear in a fact"
            )
        fact = (head, relation, tail)
        if fact in self._facts:
            return
        self._facts.add(fact)
        self._fact_order.append(fact)
        tails = self._tails.setdefault((head, relation), [])
        insort(tails, tail)
        self._tail_views.pop((head, relation), None)
        out = self._out_relations.setdefault(head, [])
        if len(tails) == 1:
            insort(out, relation)

    def add_named_fact(self, head: str, relation: str, tail: str) -> Fact:
        fact = (self.intern_entity(head), self.intern_relation(relation), self.intern_entity(tail))
        self.add_fact(*fact)
        return fact

    def has_fact(self, head: int, relation: int, tail: int) -> bool:
        return (head, relation, tail) in self._facts

    def facts(self) -> Iterator[Fact]:
        """All facts in insertion order."""
        return iter(self._fact_order)

    def lookup_tails(self, head: int, relation: int) -> Tuple[int, ...]:
        view = self._tail_views.get((head, relation))
        if view is None:
            view = tuple(self._tails.get((head, relation), ()))
            self._tail_views[(head, relation)] = view
        return view

    def fanout(self, head: int, relation: int) -> int:
        return len(self._tails.get((head, relation), ()))

    def outgoing_relations(self, head: int) -> Tuple[int, ...]:
        return tuple(self._out_relations.get(head, ()))

    def _is_tail(self, head: int, relation: int, tail: int) -> bool:
        tails = self._tails.get((head, relation))
        if not tails:
            return False
        pos = bisect_left(tails, tail)
        return pos < len(tails) and tails[pos] == tail

    # -- paths -----------------------------------------------------------------

    def final_answer_set(self, path: ReasoningPath) -> Tuple[int, ...]:
        return self.lookup_tails(path.entities[-1], path.relations[-1])

    def validate_path(self, path: ReasoningPath, max_hops: Optional[int] = None) -> None:
        if max_hops is not None and path.hops > max_hops:
            raise InvalidPathError(f"Path has {path.hops} hops, more than {max_hops}")
        for entity in path.entities:
            self._check_entity(entity)
        for relation in path.relations:
            self._check_relation(relation)
        for t in range(1, path.hops):
            head, relation, tail = path.entities[t - 1], path.relations[t - 1], path.entities[t]
            if not self._is_tail(head, relation, tail):
                raise InvalidPathError(
                    f"Step {t} ({self.entity_name(head)}, {self.relation_name(relation)}, "
                    f"{self.entity_name(tail)}) is not a fact"
                )
        if not self.final_answer_set(path):
            raise InvalidPathError("Last hop of the path has no tail entities")

    def enumerate_paths(self, topic: int, answer: int, max_hops: int) -> List[ReasoningPath]:
        """
        Every path of at most `max_hops` relations from `topic` whose last hop reaches `answer`.

        Cycles are allowed; the hop bound alone guarantees termination. Paths come
        back deduplicated and in lexicographic order of their id sequence.
        """
        if max_hops < 1:
            raise ValueError(f"max_hops must be >= 1, got {max_hops}")
        self._check_entity(topic)
        self._check_entity(answer)

        found: List[ReasoningPath] = []

        def dfs(entities: Tuple[int, ...], relations: Tuple[int, ...]) -> None:
            current = entities[-1]
            for relation in self.outgoing_relations(current):
                if self._is_tail(current, relation, answer):
                    found.append(ReasoningPath(entities, relations + (relation,)))
                if len(relations) + 1 < max_hops:
                    for tail in self.lookup_tails(current, relation):
                        dfs(entities + (tail,), relations + (relation,))

        dfs((topic,), ())
        found.sort(key=ReasoningPath.id_sequence)
        return found

    def filter_paths_by_fanout(self, paths: Sequence[ReasoningPath], k1: int) -> List[ReasoningPath]:
        """Keep the paths whose last hop points to at most k1 entities, preserving order."""
        if k1 < 1:
            raise ValueError(f"k1 must be >= 1, got {k1}")
        return [path for path in paths if len(self.final_answer_set(path)) <= k1]

    def __repr__(self) -> str:
        return (
            f"KnowledgeBase(entities={self.entity_count}, "
            f"relations={self.relation_count - 2}, facts={self.fact_count})"
        )
