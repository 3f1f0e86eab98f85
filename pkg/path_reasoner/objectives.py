"""
Training objectives over the joint scores log[p(y|p,q) p(p|q)] of an instance's selected paths.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from path_reasoner.kb_store import ReasoningPath


class ObjectiveVariant(str, Enum):
    SINGLE_GROUND_TRUTH = "single_ground_truth"
    SINGLE_RANDOM = "single_random"
    MULTIPLE_PRODUCT = "multiple_product"
    MULTIPLE_MARGINAL = "multiple_marginal"

    @classmethod
    def parse(cls, value: str) -> "ObjectiveVariant":
        """Accept full names and the short CLI forms gt / random / product / marginal."""
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower().replace("-", "_")
        aliases = {
            "gt": cls.SINGLE_GROUND_TRUTH,
            "ground_truth": cls.SINGLE_GROUND_TRUTH,
            "random": cls.SINGLE_RANDOM,
            "product": cls.MULTIPLE_PRODUCT,
            "marginal": cls.MULTIPLE_MARGINAL,
        }
        if text in aliases:
            return aliases[text]
        return cls(text)

    @property
    def single_path(self) -> bool:
        return self in (ObjectiveVariant.SINGLE_GROUND_TRUTH, ObjectiveVariant.SINGLE_RANDOM)


@dataclass(frozen=True)
class PathBatchItem:
    """One training instance as the model sees it: question word ids and its selected paths."""

    question: Tuple[int, ...]
    paths: Tuple[ReasoningPath, ...]


def instance_loss(joint_log_probs: np.ndarray, variant: ObjectiveVariant) -> Tuple[float, np.ndarray]:
    """
    Negated objective for one instance and its derivative w.r.t. each joint log-probability.

    single_*          -log w          (exactly one path)
    multiple_product  -sum_p log w_p
    multiple_marginal -log sum_p w_p
    """
    joints = np.asarray(joint_log_probs, dtype=np.float64)
    if joints.size == 0:
        raise ValueError("An instance needs at least one selected path")
    if variant.single_path:
        if joints.size != 1:
            raise ValueError(f"{variant.value} expects exactly one path, got {joints.size}")
        return float(-joints[0]), np.array([-1.0])
    if variant is ObjectiveVariant.MULTIPLE_PRODUCT:
        return float(-joints.sum()), -np.ones_like(joints)
    return float(-logsumexp(joints)), -softmax(joints)
