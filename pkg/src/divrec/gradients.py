"""Exact gradients of the weighted two-branch objective, plus a numeric check.

The objective over a pair of batches is

    L = mean_i w1_i * hinge1_i  +  mean_j w2_j * hinge2_j  +  mean_i kl_i

where hinge losses are the two-way margin terms of each branch on its own
batch and kl_i compares softmax-normalized relation vectors of both branches
on the conventional batch's pairs (conventional branch as reference).
Gradients are hand-derived reverse mode; ``finite_difference_check`` is the
independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .model import AspectProfiles, BranchParameters, HistoryIndex
from .objective import AblationFlags
from .sampling import TrainingBatch


@dataclass
class BatchNoise:
    """Frozen reparameterization noise for one batch (one vector per entity slot)."""

    user: np.ndarray  # (B, D)
    positive: np.ndarray  # (B, D)
    negative: np.ndarray  # (B, P, D)

    @staticmethod
    def draw(rng: np.random.Generator, batch: int, num_neg: int, dim: int) -> "BatchNoise":
        return BatchNoise(
            user=rng.standard_normal((batch, dim)),
            positive=rng.standard_normal((batch, dim)),
            negative=rng.standard_normal((batch, num_neg, dim)),
        )

    @staticmethod
    def zeros(batch: int, num_neg: int, dim: int) -> "BatchNoise":
        return BatchNoise(
            user=np.zeros((batch, dim)),
            positive=np.zeros((batch, dim)),
            negative=np.zeros((batch, num_neg, dim)),
        )


@dataclass
class GradientSet:
    """Dense gradients for one branch plus touched-row bookkeeping."""

    d_user: np.ndarray
    d_item: np.ndarray
    d_attention: np.ndarray
    d_aspect_mean: np.ndarray
    d_aspect_std: np.ndarray
    touched_users: np.ndarray  # bool (M,)
    touched_items: np.ndarray  # bool (N,)

    @staticmethod
    def zeros_like(params: BranchParameters) -> "GradientSet":
        return GradientSet(
            d_user=np.zeros_like(params.user_embeddings),
            d_item=np.zeros_like(params.item_embeddings),
            d_attention=np.zeros_like(params.attention_matrix),
            d_aspect_mean=np.zeros_like(params.aspect_mean_matrix),
            d_aspect_std=np.zeros_like(params.aspect_std_matrix),
            touched_users=np.zeros(len(params.user_embeddings), dtype=bool),
            touched_items=np.zeros(len(params.item_embeddings), dtype=bool),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "user_embeddings": self.d_user,
            "item_embeddings": self.d_item,
            "attention_matrix": self.d_attention,
            "aspect_mean_matrix": self.d_aspect_mean,
            "aspect_std_matrix": self.d_aspect_std,
        }


@dataclass
class LossBreakdown:
    total: float
    margin_conv: float  # unweighted mean hinge of the conventional branch
    margin_adp: float
    consistency: float


def _as_weight_array(w, batch: int) -> np.ndarray:
    arr = np.asarray(w, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(batch, float(arr))
    if arr.shape != (batch,):
        raise ValueError(f"weights must be scalar or shape ({batch},)")
    return arr


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _margin_branch(params, profiles, hist, batch, noise, weights, margin, flags):
    grads = GradientSet.zeros_like(params)
    batch_size = len(batch)
    r_fw = np.zeros((batch_size, params.dim))
    r_bw = np.zeros((batch_size, params.dim))
    margins, health = kernels.margin_pass(
        params.user_embeddings, params.item_embeddings, params.attention_matrix,
        params.aspect_mean_matrix, params.aspect_std_matrix,
        profiles.user_aspect_weights, profiles.item_aspect_weights,
        batch.users, batch.positives, batch.negatives,
        hist.user_hist, hist.user_ptr, hist.item_aud, hist.item_ptr,
        noise.user, noise.positive, noise.negative,
        weights / batch_size, float(margin),
        flags.use_attention, flags.use_diversity, flags.use_backward,
        grads.d_user, grads.d_item, grads.d_attention,
        grads.d_aspect_mean, grads.d_aspect_std,
        grads.touched_users, grads.touched_items,
        r_fw, r_bw,
    )
    bad = np.flatnonzero(~(np.isfinite(health) & np.isfinite(margins)))
    if len(bad):
        raise FloatingPointError(
            f"non-finite distance in {batch.branch_tag} branch "
            f"(triple {int(bad[0])}: user {int(batch.users[bad[0]])}, "
            f"item {int(batch.positives[bad[0]])})"
        )
    return margins, grads, r_fw, r_bw


def _kl_and_upstream(r1: np.ndarray, r2: np.ndarray):
    p = _softmax_rows(r1)
    q = _softmax_rows(r2)
    log_ratio = np.log(p) - np.log(q)
    kl = np.sum(p * log_ratio, axis=1)
    g_r1 = p * (log_ratio - kl[:, None])
    g_r2 = q - p
    return kl, g_r1, g_r2


def loss_and_gradients(
    branch1: BranchParameters | None,
    branch2: BranchParameters | None,
    profiles: AspectProfiles,
    hist: HistoryIndex,
    batch_conv: TrainingBatch | None,
    batch_adp: TrainingBatch | None,
    weights: tuple,
    margin: float,
    noise_conv: BatchNoise | None = None,
    noise_adp: BatchNoise | None = None,
    flags: AblationFlags | None = None,
) -> tuple[LossBreakdown, tuple[GradientSet | None, GradientSet | None]]:
    """Objective value and exact gradients for both branches.

    ``weights`` is (w_conv, w_adp); each entry may be a scalar or a
    per-triple array over the corresponding batch. Noise defaults to zero
    (deterministic relations). The adaptive branch shares the conventional
    batch's noise inside the consistency term so the divergence is purely
    parametric.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    flags = flags or AblationFlags()
    use_conv = not flags.disable_conventional_branch
    use_adp = not flags.disable_adaptive_branch

    grads1 = grads2 = None
    margin1 = np.zeros(0)
    margin2 = np.zeros(0)
    total = 0.0
    r1_fw = r1_bw = None

    if use_conv:
        if batch_conv is None:
            raise ValueError("conventional branch enabled but batch_conv is missing")
        w1 = _as_weight_array(weights[0], len(batch_conv))
        if np.any(w1 < 0):
            raise ValueError("branch weights must be nonnegative")
        nz1 = noise_conv or BatchNoise.zeros(len(batch_conv), batch_conv.num_negatives, branch1.dim)
        margin1, grads1, r1_fw, r1_bw = _margin_branch(
            branch1, profiles, hist, batch_conv, nz1, w1, margin, flags)
        total += float(np.mean(w1 * margin1))

    if use_adp:
        if branch2 is None or batch_adp is None:
            raise ValueError("adaptive branch enabled but branch2/batch_adp is missing")
        w2 = _as_weight_array(weights[1], len(batch_adp))
        if np.any(w2 < 0):
            raise ValueError("branch weights must be nonnegative")
        nz2 = noise_adp or BatchNoise.zeros(len(batch_adp), batch_adp.num_negatives, branch2.dim)
        margin2, grads2, _, _ = _margin_branch(
            branch2, profiles, hist, batch_adp, nz2, w2, margin, flags)
        total += float(np.mean(w2 * margin2))

    l3_mean = 0.0
    if use_conv and use_adp and not flags.drop_consistency_loss:
        nz1 = noise_conv or BatchNoise.zeros(len(batch_conv), batch_conv.num_negatives, branch1.dim)
        batch_size = len(batch_conv)
        r2_fw = np.zeros((batch_size, branch2.dim))
        r2_bw = np.zeros((batch_size, branch2.dim))
        kernels.relation_pass(
            branch2.user_embeddings, branch2.item_embeddings, branch2.attention_matrix,
            branch2.aspect_mean_matrix, branch2.aspect_std_matrix,
            profiles.user_aspect_weights, profiles.item_aspect_weights,
            batch_conv.users, batch_conv.positives,
            hist.user_hist, hist.user_ptr, hist.item_aud, hist.item_ptr,
            nz1.user, nz1.positive,
            flags.use_attention, flags.use_diversity, flags.use_backward,
            r2_fw, r2_bw,
        )
        kl_fw, g1_fw, g2_fw = _kl_and_upstream(r1_fw, r2_fw)
        kl_values = kl_fw.copy()
        if flags.use_backward:
            kl_bw, g1_bw, g2_bw = _kl_and_upstream(r1_bw, r2_bw)
            kl_values += kl_bw
        else:
            g1_bw = np.zeros_like(g1_fw)
            g2_bw = np.zeros_like(g2_fw)
        l3_mean = float(np.mean(kl_values))
        total += l3_mean

        for params, grads, up_fw, up_bw in (
            (branch1, grads1, g1_fw, g1_bw),
            (branch2, grads2, g2_fw, g2_bw),
        ):
            kernels.relation_backward(
                params.user_embeddings, params.item_embeddings, params.attention_matrix,
                params.aspect_mean_matrix, params.aspect_std_matrix,
                profiles.user_aspect_weights, profiles.item_aspect_weights,
                batch_conv.users, batch_conv.positives,
                hist.user_hist, hist.user_ptr, hist.item_aud, hist.item_ptr,
                nz1.user, nz1.positive,
                np.ascontiguousarray(up_fw / batch_size),
                np.ascontiguousarray(up_bw / batch_size),
                flags.use_attention, flags.use_diversity, flags.use_backward,
                grads.d_user, grads.d_item, grads.d_attention,
                grads.d_aspect_mean, grads.d_aspect_std,
                grads.touched_users, grads.touched_items,
            )

    if not np.isfinite(total):
        # margin passes validate themselves, so only the KL term remains
        raise FloatingPointError("non-finite consistency loss")

    breakdown = LossBreakdown(
        total=total,
        margin_conv=float(np.mean(margin1)) if len(margin1) else 0.0,
        margin_adp=float(np.mean(margin2)) if len(margin2) else 0.0,
        consistency=l3_mean,
    )
    return breakdown, (grads1, grads2)


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class CheckInstance:
    """A frozen small problem: parameters, batches, noise, and loss settings."""

    branch1: BranchParameters
    branch2: BranchParameters | None
    profiles: AspectProfiles
    hist: HistoryIndex
    batch_conv: TrainingBatch | None
    batch_adp: TrainingBatch | None
    weights: tuple
    margin: float
    noise_conv: BatchNoise | None = None
    noise_adp: BatchNoise | None = None
    flags: AblationFlags = field(default_factory=AblationFlags)

    def loss(self) -> float:
        breakdown, _ = loss_and_gradients(
            self.branch1, self.branch2, self.profiles, self.hist,
            self.batch_conv, self.batch_adp, self.weights, self.margin,
            self.noise_conv, self.noise_adp, self.flags,
        )
        return breakdown.total

    def analytic(self):
        return loss_and_gradients(
            self.branch1, self.branch2, self.profiles, self.hist,
            self.batch_conv, self.batch_adp, self.weights, self.margin,
            self.noise_conv, self.noise_adp, self.flags,
        )


@dataclass
class FiniteDifferenceReport:
    max_rel_error: float
    worst: tuple[str, str, tuple]  # (branch, tensor, index)
    per_tensor: dict[str, float]
    num_parameters: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def finite_difference_check(
    instance: CheckInstance,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    gradient_fn=None,
) -> FiniteDifferenceReport:
    """Probe every parameter entry with central differences (noise frozen).

    The relative error uses a small denominator floor so zero-gradient
    entries compare at finite-difference noise level rather than blowing up.
    """
    if step == 0:
        raise ValueError("degenerate probe: finite-difference step must be nonzero")
    if gradient_fn is None:
        gradient_fn = CheckInstance.analytic

    _, (g1, g2) = gradient_fn(instance)
    branches = [("branch1", instance.branch1, g1)]
    if instance.branch2 is not None:
        branches.append(("branch2", instance.branch2, g2))

    max_err = 0.0
    worst = ("", "", ())
    per_tensor: dict[str, float] = {}
    count = 0
    for branch_name, params, grads in branches:
        if grads is None:
            continue
        tensors = params.tensors()
        grad_tensors = grads.tensors()
        for name, theta in tensors.items():
            analytic = grad_tensors[name]
            tensor_err = 0.0
            it = np.nditer(theta, flags=["multi_index"])
            while not it.finished:
                ix = it.multi_index
                orig = theta[ix]
                theta[ix] = orig + step
                f_plus = instance.loss()
                theta[ix] = orig - step
                f_minus = instance.loss()
                theta[ix] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = analytic[ix]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                if err > tensor_err:
                    tensor_err = err
                if err > max_err:
                    max_err = err
                    worst = (branch_name, name, ix)
                count += 1
                it.iternext()
            key = f"{branch_name}.{name}"
            per_tensor[key] = max(per_tensor.get(key, 0.0), tensor_err)

    return FiniteDifferenceReport(
        max_rel_error=max_err,
        worst=worst,
        per_tensor=per_tensor,
        num_parameters=count,
        tolerance=tolerance,
    )
