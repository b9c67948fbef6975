"""Branch scheduling and the loss components of the weighted objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AblationFlags:
    """Structural switches for model variants.

    ``disable_*`` removes a whole branch, ``reverse_order`` swaps the branch
    weights, ``drop_attention`` reduces relations to the diversity part only,
    ``drop_diversity_relation`` zeroes the Gaussian relation,
    ``drop_backward_direction`` keeps only user-to-item translation, and
    ``drop_consistency_loss`` removes the cross-branch divergence term.
    """

    disable_adaptive_branch: bool = False
    disable_conventional_branch: bool = False
    reverse_order: bool = False
    drop_attention: bool = False
    drop_diversity_relation: bool = False
    drop_backward_direction: bool = False
    drop_consistency_loss: bool = False

    def __post_init__(self):
        if self.disable_adaptive_branch and self.disable_conventional_branch:
            raise ValueError("cannot disable both branches")

    @property
    def use_attention(self) -> bool:
        return not self.drop_attention

    @property
    def use_diversity(self) -> bool:
        return not self.drop_diversity_relation

    @property
    def use_backward(self) -> bool:
        return not self.drop_backward_direction

    @property
    def single_branch(self) -> bool:
        return self.disable_adaptive_branch or self.disable_conventional_branch


def alpha(diversity: float, epoch: int, total_epochs: int) -> float:
    """Schedule value d_u * T / T_max, clamped to [0, 1]."""
    if total_epochs < 1:
        raise ValueError("total_epochs must be >= 1")
    return float(min(max(diversity * epoch / total_epochs, 0.0), 1.0))


def branch_weights(
    a: float, skewed_domain: bool, reverse_order: bool = False
) -> tuple[float, float]:
    """Weights (conventional, adaptive) for the combined objective.

    In a non-skewed domain the conventional weight is ``a`` and grows over
    training; in a skewed domain the roles flip so the adaptive branch gets
    the late focus. ``reverse_order`` swaps the outcome for ablations.
    """
    if not 0.0 <= a <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    w = (a, 1.0 - a) if not skewed_domain else (1.0 - a, a)
    if reverse_order:
        w = (w[1], w[0])
    return w


def margin_loss(
    distances_pos: tuple[float, float],
    distances_neg: tuple[float, float],
    margin: float,
) -> float:
    """Two-way hinge for one positive/negative pair.

    ``distances_pos`` and ``distances_neg`` are (forward, backward) squared
    translation distances; each direction contributes
    max(0, d_pos - d_neg + margin).
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    fw = max(0.0, distances_pos[0] - distances_neg[0] + margin)
    bw = max(0.0, distances_pos[1] - distances_neg[1] + margin)
    return fw + bw


def softmax(x: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) for strictly positive distributions."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(np.sum(p * (np.log(p) - np.log(q))))


def consistency_loss(
    branch1_relations: tuple[np.ndarray, np.ndarray],
    branch2_relations: tuple[np.ndarray, np.ndarray],
) -> float:
    """Divergence between the two branches' translations on a shared pair.

    Each translation vector is softmax-normalized over its components; the
    conventional branch is the reference distribution in both directions.
    """
    fw1, bw1 = branch1_relations
    fw2, bw2 = branch2_relations
    total = kl_divergence(softmax(fw1), softmax(fw2))
    if bw1 is not None and bw2 is not None:
        total += kl_divergence(softmax(bw1), softmax(bw2))
    return total
