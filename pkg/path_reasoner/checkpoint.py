"""
Checkpoint file format.

    line 1   b"PATHREASONER-CKPT 1\\n"
    line 2   one JSON object (sorted keys, no whitespace) terminated by b"\\n":
               dims        ModelDims fields
               seed        initialization seed
               tensors     [[name, shape], ...] in PARAM_ORDER
               vocabulary  word list, index = word id
               entities    KB entity count the model was trained against
               relations   relation names, index = relation id (<sop>, <eop> first)
    rest     every tensor in PARAM_ORDER, C order, little-endian float64

The payload size must equal the sum of the tensor sizes times 8 bytes.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union
import json
import logging

import numpy as np

from path_reasoner.errors import CheckpointError, CheckpointMismatchError
from path_reasoner.kb_store import KnowledgeBase
from path_reasoner.path_model import PARAM_ORDER, ModelDims, ModelParams

logger = logging.getLogger(__name__)

MAGIC = b"PATHREASONER-CKPT 1\n"
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    params: ModelParams
    seed: int
    vocabulary: List[str]
    entity_count: int
    relation_names: List[str]

    def check_compatible(self, kb: KnowledgeBase, vocabulary_size: Optional[int] = None) -> None:
        """Raise CheckpointMismatchError unless the KB (and vocabulary) match the trained model."""
        dims = self.params.dims
        if kb.entity_count != dims.n_entities:
            raise CheckpointMismatchError(
                f"Checkpoint has {dims.n_entities} entities, KB has {kb.entity_count}"
            )
        if kb.relation_count != dims.n_relations or kb.relations.names() != self.relation_names:
            raise CheckpointMismatchError(
                f"Checkpoint relations ({dims.n_relations}) do not match the KB ({kb.relation_count})"
            )
        if vocabulary_size is not None and vocabulary_size != dims.n_words:
            raise CheckpointMismatchError(
                f"Checkpoint has {dims.n_words} words, vocabulary has {vocabulary_size}"
            )


def save_checkpoint(
    path: Union[str, Path],
    params: ModelParams,
    seed: int,
    vocabulary: List[str],
    kb: KnowledgeBase,
) -> None:
    header = {
        "dims": params.dims.model_dump(),
        "seed": seed,
        "tensors": [[name, list(tensor.shape)] for name, tensor in params.items()],
        "vocabulary": list(vocabulary),
        "entities": kb.entity_count,
        "relations": kb.relations.names(),
    }
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for _, tensor in params.items():
            fh.write(np.ascontiguousarray(tensor, dtype=_DTYPE).tobytes(order="C"))
    logger.info(f"Saved checkpoint to {path} ({params.dims.n_entities} entities, seed {seed})")


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a path reasoner checkpoint")
    header_end = data.find(b"\n", len(MAGIC))
    if header_end < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[len(MAGIC):header_end].decode("utf-8"))
        dims = ModelDims(**header["dims"])
        seed = int(header["seed"])
        vocabulary = list(header["vocabulary"])
        entity_count = int(header["entities"])
        relation_names = list(header["relations"])
        names = [name for name, _ in header.get("tensors", [])]
    except (ValueError, KeyError, TypeError, AttributeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e

    expected = dims.shapes()
    if names != list(PARAM_ORDER):
        raise CheckpointError(f"{path}: unexpected tensor order {names}")

    payload = memoryview(data)[header_end + 1:]
    total = sum(int(np.prod(shape)) for shape in expected.values()) * _DTYPE.itemsize
    if len(payload) != total:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, expected {total}")

    tensors = {}
    offset = 0
    for name, shape in expected.items():
        size = int(np.prod(shape))
        flat = np.frombuffer(payload, dtype=_DTYPE, count=size, offset=offset)
        tensors[name] = flat.astype(np.float64).reshape(shape)
        offset += size * _DTYPE.itemsize

    return Checkpoint(
        params=ModelParams(dims, tensors),
        seed=seed,
        vocabulary=vocabulary,
        entity_count=entity_count,
        relation_names=relation_names,
    )
