"""
Seeded synthetic KB and multi-hop question generator.

Questions are produced by walking a relation chain from a topic entity and
phrasing the chain with per-seed relation synonyms. A configurable share of the
questions gets a second reasoning path to its answer through a fresh bridge
entity; every question is checked with DFS against the final KB before it is
accepted, so the realized path statistics are exact.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union
import logging

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from path_reasoner.dataset import (
    QAInstance,
    QARecord,
    Vocabulary,
    has_multiple_paths,
    record_to_instance,
    save_kb,
)
from path_reasoner.errors import SyntheticSpecError
from path_reasoner.kb_store import KnowledgeBase

logger = logging.getLogger(__name__)

RELATION_SYNONYMS = [
    ("capital", "seat"), ("founder", "creator"), ("mayor", "leader"), ("spouse", "partner"),
    ("author", "writer"), ("parent", "ancestor"), ("river", "waterway"), ("currency", "money"),
    ("language", "tongue"), ("director", "filmmaker"), ("employer", "workplace"),
    ("teammate", "colleague"), ("neighbor", "borderer"), ("owner", "proprietor"),
    ("sponsor", "backer"), ("member", "affiliate"), ("producer", "maker"), ("successor", "heir"),
    ("rival", "opponent"), ("mentor", "tutor"), ("genre", "style"), ("location", "place"),
    ("religion", "faith"), ("anthem", "song"),
]

DEFAULT_TEMPLATES = [
    "what is the {chain} of {topic}",
    "which entity is the {chain} of {topic}",
    "tell me the {chain} of {topic}",
    "who or what is the {chain} of {topic}",
]


class SyntheticSpec(BaseModel):
    n_entities: int = Field(default=300, gt=1)
    n_relations: int = Field(default=12, gt=0)
    relations_per_entity: Tuple[int, int] = (1, 3)
    branching: Tuple[int, int] = (1, 2)
    hop_mix: Dict[int, float] = Field(default_factory=lambda: {2: 1.0})
    multipath_rate: float = Field(default=0.15, ge=0.0, le=1.0)
    n_train: int = Field(default=200, gt=0)
    n_dev: int = Field(default=50, ge=0)
    n_test: int = Field(default=50, ge=0)
    synonyms_per_relation: int = Field(default=2, gt=0)
    templates: List[str] = Field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    max_answers: int = Field(default=3, gt=0)
    max_hops: int = Field(default=3, gt=0)
    max_rounds: int = Field(default=30, gt=0)
    seed: int = 0

    @field_validator("hop_mix", mode="before")
    @classmethod
    def _parse_hop_mix(cls, value):
        # "2:0.5,3:0.5" from config files and CLI flags
        if isinstance(value, str):
            mix = {}
            for part in value.split(","):
                hops, _, frac = part.partition(":")
                mix[int(hops.strip())] = float(frac.strip())
            return mix
        return value

    @field_validator("templates", mode="before")
    @classmethod
    def _split_templates(cls, value):
        # "a {chain} of {topic} | b {chain} of {topic}" from config files
        if isinstance(value, str):
            return [part.strip() for part in value.split("|") if part.strip()]
        return value

    @field_validator("relations_per_entity", "branching", mode="before")
    @classmethod
    def _parse_range(cls, value):
        if isinstance(value, str):
            low, _, high = value.partition("-")
            return (int(low), int(high or low))
        return value

    @model_validator(mode="after")
    def _check(self):
        if abs(sum(self.hop_mix.values()) - 1.0) > 1e-9:
            raise ValueError(f"hop_mix fractions must sum to 1, got {sum(self.hop_mix.values())}")
        for hops, frac in self.hop_mix.items():
            if not 1 <= hops <= self.max_hops or frac < 0:
                raise ValueError(f"invalid hop_mix entry {hops}: {frac}")
        for name in ("relations_per_entity", "branching"):
            low, high = getattr(self, name)
            if not 1 <= low <= high:
                raise ValueError(f"{name} must satisfy 1 <= low <= high, got {(low, high)}")
        if self.relations_per_entity[1] > self.n_relations:
            raise ValueError("relations_per_entity exceeds n_relations")
        if self.branching[1] >= self.n_entities:
            raise ValueError("branching must be smaller than n_entities")
        for template in self.templates:
            if "{chain}" not in template or "{topic}" not in template:
                raise ValueError(f"template {template!r} needs {{chain}} and {{topic}}")
        return self

    @property
    def total_questions(self) -> int:
        return self.n_train + self.n_dev + self.n_test


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    kb: KnowledgeBase
    vocab: Vocabulary
    records: Dict[str, List[QARecord]]
    splits: Dict[str, List[QAInstance]]

    @property
    def train(self) -> List[QAInstance]:
        return self.splits["train"]

    @property
    def dev(self) -> List[QAInstance]:
        return self.splits["dev"]

    @property
    def test(self) -> List[QAInstance]:
        return self.splits["test"]


@dataclass
class _Candidate:
    topic: str
    chain: Tuple[str, ...]
    walk: Tuple[str, ...]
    text: str
    multipath: bool
    hops: int
    answers: Tuple[str, ...] = ()


def _relation_vocabulary(spec: SyntheticSpec, rng: np.random.Generator) -> Tuple[List[str], Dict[str, List[str]]]:
    pool = list(RELATION_SYNONYMS)
    order = rng.permutation(len(pool))
    names: List[str] = []
    phrases: Dict[str, List[str]] = {}
    for i in range(spec.n_relations):
        base = pool[order[i % len(pool)]]
        suffix = "" if i < len(pool) else str(i // len(pool))
        words = [f"{w}{suffix}" for w in base]
        while len(words) < spec.synonyms_per_relation:
            words.append(f"{base[0]}{suffix}x{len(words)}")
        name = f"{words[0]}_of"
        names.append(name)
        phrases[name] = list(rng.permutation(words[:spec.synonyms_per_relation]))
    return names, phrases


def _quotas(spec: SyntheticSpec) -> Dict[Tuple[int, bool], int]:
    total = spec.total_questions
    hops = sorted(spec.hop_mix)
    per_hop = {h: int(round(spec.hop_mix[h] * total)) for h in hops}
    per_hop[hops[-1]] += total - sum(per_hop.values())
    quotas: Dict[Tuple[int, bool], int] = {}
    for h in hops:
        multi = int(round(per_hop[h] * spec.multipath_rate))
        quotas[(h, True)] = multi
        quotas[(h, False)] = per_hop[h] - multi
    return quotas


class _Generator:
    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.kb = KnowledgeBase()
        self.facts: List[Tuple[str, str, str]] = []
        self.relation_names, self.phrases = _relation_vocabulary(spec, self.rng)
        self.entity_names = [f"ent_{i:04d}" for i in range(spec.n_entities)]
        self.bridges = 0
        for name in self.entity_names:
            self.kb.intern_entity(name)
        for name in self.relation_names:
            self.kb.intern_relation(name)

    def _add(self, head: str, relation: str, tail: str) -> None:
        before = self.kb.fact_count
        self.kb.add_named_fact(head, relation, tail)
        if self.kb.fact_count > before:
            self.facts.append((head, relation, tail))

    def build_base_graph(self) -> None:
        spec = self.spec
        for i, head in enumerate(self.entity_names):
            k = int(self.rng.integers(spec.relations_per_entity[0], spec.relations_per_entity[1] + 1))
            for r in self.rng.choice(spec.n_relations, size=k, replace=False):
                b = int(self.rng.integers(spec.branching[0], spec.branching[1] + 1))
                others = self.rng.choice(spec.n_entities - 1, size=b, replace=False)
                for j in others:
                    tail = self.entity_names[int(j) if j < i else int(j) + 1]
                    self._add(head, self.relation_names[int(r)], tail)
        logger.info(f"Base graph: {len(self.facts)} facts over {spec.n_entities} entities")

    def follow_chain(self, topic: str, chain: Sequence[str]) -> Set[int]:
        frontier = {self.kb.entity_id(topic)}
        for relation in chain:
            rel = self.kb.relation_id(relation)
            frontier = {t for e in frontier for t in self.kb.lookup_tails(e, rel)}
        return frontier

    def phrase(self, topic: str, chain: Sequence[str]) -> str:
        words = [str(self.rng.choice(self.phrases[r])) for r in reversed(chain)]
        template = self.spec.templates[int(self.rng.integers(len(self.spec.templates)))]
        return template.format(chain=" of the ".join(words), topic=topic)

    def sample(self, hops: int, multipath: bool) -> Optional[_Candidate]:
        topic = self.entity_names[int(self.rng.integers(self.spec.n_entities))]
        current = self.kb.entity_id(topic)
        walk: List[str] = [topic]
        chain: List[str] = []
        for t in range(hops):
            relations = self.kb.outgoing_relations(current)
            if not relations:
                return None
            rel = int(relations[int(self.rng.integers(len(relations)))])
            chain.append(self.kb.relation_name(rel))
            if t < hops - 1:
                tails = self.kb.lookup_tails(current, rel)
                current = int(tails[int(self.rng.integers(len(tails)))])
                walk.append(self.kb.entity_name(current))
        answers = sorted(self.follow_chain(topic, chain))
        if not answers or len(answers) > self.spec.max_answers:
            return None
        if multipath:
            self.inject_alternative(topic, chain[0], self.kb.entity_name(answers[0]))
        return _Candidate(
            topic=topic,
            chain=tuple(chain),
            walk=tuple(walk),
            text=self.phrase(topic, chain),
            multipath=multipath,
            hops=hops,
        )

    def inject_alternative(self, topic: str, first_relation: str, answer: str) -> None:
        """Second path topic -r_a-> bridge -r_b-> answer through a fresh bridge entity."""
        bridge = f"bridge_{self.bridges:04d}"
        self.bridges += 1
        choices = [r for r in self.relation_names if r != first_relation] or self.relation_names
        r_a = choices[int(self.rng.integers(len(choices)))]
        r_b = self.relation_names[int(self.rng.integers(len(self.relation_names)))]
        self.kb.intern_entity(bridge)
        self._add(topic, r_a, bridge)
        self._add(bridge, r_b, answer)

    def verify(self, candidate: _Candidate) -> bool:
        answers = sorted(self.follow_chain(candidate.topic, candidate.chain))
        if not answers or len(answers) > self.spec.max_answers:
            return False
        topic = self.kb.entity_id(candidate.topic)
        multi = has_multiple_paths(self.kb, topic, answers, self.spec.max_hops)
        if multi != candidate.multipath:
            return False
        candidate.answers = tuple(self.kb.entity_name(a) for a in answers)
        return True

    def generate(self) -> List[_Candidate]:
        quotas = _quotas(self.spec)
        accepted: List[_Candidate] = []
        for round_no in range(1, self.spec.max_rounds + 1):
            filled: Dict[Tuple[int, bool], int] = {key: 0 for key in quotas}
            for c in accepted:
                filled[(c.hops, c.multipath)] += 1
            fresh: List[_Candidate] = []
            for key, quota in sorted(quotas.items()):
                missing = quota - filled[key]
                tries = 0
                while missing > 0 and tries < 20 * quota + 20:
                    tries += 1
                    candidate = self.sample(*key)
                    if candidate is not None:
                        fresh.append(candidate)
                        missing -= 1
            kept: List[_Candidate] = []
            seen: Set[str] = set()
            counts: Dict[Tuple[int, bool], int] = {key: 0 for key in quotas}
            for candidate in accepted + fresh:
                key = (candidate.hops, candidate.multipath)
                if candidate.text in seen or counts[key] >= quotas[key]:
                    continue
                if self.verify(candidate):
                    kept.append(candidate)
                    seen.add(candidate.text)
                    counts[key] += 1
            accepted = kept
            logger.debug(f"Round {round_no}: {len(accepted)} of {sum(quotas.values())} questions accepted")
            if counts == quotas:
                return accepted
        raise SyntheticSpecError(
            f"Could not realize {sum(quotas.values())} questions with multipath rate "
            f"{self.spec.multipath_rate} after {self.spec.max_rounds} rounds "
            f"(accepted {len(accepted)}); increase n_entities or relax the spec"
        )


def generate_synthetic(spec: SyntheticSpec) -> SyntheticCorpus:
    """Deterministic in `spec`: same spec, same KB, same splits, same files."""
    gen = _Generator(spec)
    gen.build_base_graph()
    candidates = gen.generate()
    order = gen.rng.permutation(len(candidates))
    candidates = [candidates[int(i)] for i in order]

    # ids follow first appearance in the fact list, exactly as load_kb will assign them
    kb = KnowledgeBase()
    for head, relation, tail in gen.facts:
        kb.add_named_fact(head, relation, tail)

    bounds = {
        "train": (0, spec.n_train),
        "dev": (spec.n_train, spec.n_train + spec.n_dev),
        "test": (spec.n_train + spec.n_dev, spec.total_questions),
    }
    vocab = Vocabulary()
    records: Dict[str, List[QARecord]] = {}
    splits: Dict[str, List[QAInstance]] = {}
    for split, (start, end) in bounds.items():
        records[split] = []
        for n, candidate in enumerate(candidates[start:end]):
            path: List[str] = []
            for entity, relation in zip(candidate.walk, candidate.chain):
                path.extend([entity, relation])
            records[split].append(QARecord(
                id=f"{split}-{n:05d}",
                question=candidate.text,
                topic_entity=candidate.topic,
                answers=list(candidate.answers),
                path=path,
            ))
        splits[split] = [
            record_to_instance(record, kb, vocab, default_id=record.id) for record in records[split]
        ]
    multi = sum(c.multipath for c in candidates)
    logger.info(
        f"Generated {len(candidates)} questions ({multi} with more than one path), "
        f"{kb.fact_count} facts, {gen.bridges} bridge entities"
    )
    return SyntheticCorpus(spec=spec, kb=kb, vocab=vocab, records=records, splits=splits)


def write_corpus(corpus: SyntheticCorpus, out_dir: Union[str, Path]) -> Path:
    """kb.tsv, {train,dev,test}.jsonl and spec.json under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_kb(corpus.kb, out / "kb.tsv")
    for split, records in corpus.records.items():
        lines = [record.model_dump_json(exclude_none=True) for record in records]
        (out / f"{split}.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    (out / "spec.json").write_text(corpus.spec.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote synthetic corpus to {out}")
    return out
