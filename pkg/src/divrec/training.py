"""Bilateral training loop: per-user schedule, weighted objective, Adam.

Every step draws a uniform batch for the conventional branch and a reversed
batch for the adaptive branch, weights each triple's hinge loss by its own
user's schedule value, adds the cross-branch consistency term, and applies
one Adam step per branch followed by unit-ball clipping of the embeddings.
All randomness descends from one seed through named sub-streams
(init-conv, init-adp, sampler-conv, sampler-adp, noise), so runs are
bit-reproducible at thread count one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import DiversityProfile, InteractionCorpus
from .gradients import BatchNoise, GradientSet, loss_and_gradients
from .model import (
    AspectProfiles,
    BranchParameters,
    HistoryIndex,
    RankingScorer,
    build_aspect_profiles,
    init_branch,
)
from .objective import AblationFlags, alpha, branch_weights
from .sampling import ReversedSampler, UniformSampler


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int, cause: Exception):
        super().__init__(f"training diverged at epoch {epoch}, step {step}: {cause}")
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters and structural switches for one training run."""

    batch_size: int = 128
    max_epochs: int = 20
    learning_rate: float = 5e-4
    margin: float = 1.0
    embedding_dim: int = 50
    num_aspects: int = 20
    negatives: int = 20
    seed: int = 42
    skew_threshold: float = 0.2
    max_history: int = 500
    init_std: float = 0.01
    clip_embeddings: bool = True
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def validate(self) -> None:
        if min(self.batch_size, self.max_epochs, self.embedding_dim,
               self.num_aspects, self.negatives, self.max_history) < 1:
            raise ValueError("counts in TrainConfig must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.skew_threshold < 0:
            raise ValueError("skew_threshold must be nonnegative")

    def with_flags(self, **kwargs) -> "TrainConfig":
        return replace(self, ablation=replace(self.ablation, **kwargs))


class AdamOptimizer:
    """Adam with lazy (touched-rows-only) moment updates for embedding tables."""

    def __init__(self, params: BranchParameters, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors().items()}

    def step(self, params: BranchParameters, grads: GradientSet) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        lr_t = self.lr * math.sqrt(bc2) / bc1
        tensors = params.tensors()
        grad_tensors = grads.tensors()
        rows = {
            "user_embeddings": np.flatnonzero(grads.touched_users),
            "item_embeddings": np.flatnonzero(grads.touched_items),
        }
        for name, theta in tensors.items():
            g = grad_tensors[name]
            m, v = self.m[name], self.v[name]
            sel = rows.get(name)
            if sel is not None:
                if len(sel) == 0:
                    continue
                g = g[sel]
                m[sel] = self.beta1 * m[sel] + (1.0 - self.beta1) * g
                v[sel] = self.beta2 * v[sel] + (1.0 - self.beta2) * (g * g)
                theta[sel] -= lr_t * m[sel] / (np.sqrt(v[sel]) + self.eps)
            else:
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                theta -= lr_t * m / (np.sqrt(v) + self.eps)


def clip_embedding_rows(params: BranchParameters, rows_u: np.ndarray, rows_i: np.ndarray) -> None:
    """Project the given embedding rows back onto the unit ball."""
    for table, rows in ((params.user_embeddings, rows_u), (params.item_embeddings, rows_i)):
        if len(rows) == 0:
            continue
        norms = np.linalg.norm(table[rows], axis=1)
        over = norms > 1.0
        if np.any(over):
            table[rows[over]] /= norms[over][:, None]


@dataclass
class EpochRecord:
    epoch: int
    loss_conventional: float | None
    loss_adaptive: float | None
    loss_consistency: float | None


@dataclass
class TrainedModel:
    """Both branches (either may be absent under ablation) plus run metadata."""

    branch_conv: BranchParameters | None
    branch_adp: BranchParameters | None
    profiles: AspectProfiles
    history: list[EpochRecord]
    config: TrainConfig
    skewed_domain: bool

    def scorer(self, corpus: InteractionCorpus, profile: DiversityProfile) -> RankingScorer:
        return RankingScorer(
            self.branch_conv, self.branch_adp, self.profiles, corpus, profile,
            flags=self.config.ablation, max_history=self.config.max_history,
        )


def train(
    corpus: InteractionCorpus,
    profile: DiversityProfile,
    config: TrainConfig,
    epoch_callback=None,
) -> TrainedModel:
    """Run the full bilateral loop and return the trained branches.

    ``epoch_callback(epoch, model)`` runs after each epoch (checkpointing
    hook). Raises :class:`TrainingDivergedError` on a non-finite loss.
    """
    config.validate()
    flags = config.ablation
    if corpus.num_train == 0:
        raise ValueError("corpus has no train interactions")

    seeds = np.random.SeedSequence(config.seed).spawn(5)
    rng_init_conv = np.random.default_rng(seeds[0])
    rng_init_adp = np.random.default_rng(seeds[1])
    rng_sampler_conv = np.random.default_rng(seeds[2])
    rng_sampler_adp = np.random.default_rng(seeds[3])
    rng_noise = np.random.default_rng(seeds[4])

    # aspects cannot outnumber categories; clamp so stock settings run everywhere
    if config.num_aspects > corpus.num_categories:
        config = replace(config, num_aspects=corpus.num_categories)
    profiles = build_aspect_profiles(corpus, config.num_aspects)
    hist = HistoryIndex(corpus, config.max_history)

    use_conv = not flags.disable_conventional_branch
    use_adp = not flags.disable_adaptive_branch
    branch_conv = init_branch(corpus.num_users, corpus.num_items, config.embedding_dim,
                              config.num_aspects, rng_init_conv, config.init_std) if use_conv else None
    branch_adp = init_branch(corpus.num_users, corpus.num_items, config.embedding_dim,
                             config.num_aspects, rng_init_adp, config.init_std) if use_adp else None
    adam_conv = AdamOptimizer(branch_conv, config.learning_rate) if use_conv else None
    adam_adp = AdamOptimizer(branch_adp, config.learning_rate) if use_adp else None

    sampler_conv = UniformSampler(corpus, config.negatives, rng_sampler_conv) if use_conv else None
    sampler_adp = ReversedSampler(corpus, profile, config.negatives, rng_sampler_adp) if use_adp else None

    steps_per_epoch = math.ceil(corpus.num_train / config.batch_size)
    d_u = np.nan_to_num(profile.diversity_of_user, nan=0.0)

    model = TrainedModel(branch_conv, branch_adp, profiles, [], config, profile.skewed_domain)

    for epoch in range(1, config.max_epochs + 1):
        sum_conv = sum_adp = sum_l3 = 0.0
        for step_idx in range(steps_per_epoch):
            batch_conv = sampler_conv.sample(config.batch_size) if use_conv else None
            batch_adp = sampler_adp.sample(config.batch_size) if use_adp else None

            noise_conv = BatchNoise.draw(
                rng_noise, config.batch_size, config.negatives, config.embedding_dim
            ) if use_conv else None
            noise_adp = BatchNoise.draw(
                rng_noise, config.batch_size, config.negatives, config.embedding_dim
            ) if use_adp else None

            if flags.single_branch:
                # one branch carries the whole objective
                w_conv = 1.0 if use_conv else 0.0
                w_adp = 1.0 if use_adp else 0.0
            else:
                a_conv = np.clip(d_u[batch_conv.users] * epoch / config.max_epochs, 0.0, 1.0)
                a_adp = np.clip(d_u[batch_adp.users] * epoch / config.max_epochs, 0.0, 1.0)
                if profile.skewed_domain != flags.reverse_order:
                    w_conv, w_adp = 1.0 - a_conv, a_adp
                else:
                    w_conv, w_adp = a_conv, 1.0 - a_adp

            try:
                breakdown, (g_conv, g_adp) = loss_and_gradients(
                    branch_conv, branch_adp, profiles, hist, batch_conv, batch_adp,
                    (w_conv, w_adp), config.margin, noise_conv, noise_adp, flags,
                )
            except FloatingPointError as exc:
                raise TrainingDivergedError(epoch, step_idx, exc) from exc

            if use_conv and g_conv is not None:
                adam_conv.step(branch_conv, g_conv)
                if config.clip_embeddings:
                    clip_embedding_rows(branch_conv,
                                        np.flatnonzero(g_conv.touched_users),
                                        np.flatnonzero(g_conv.touched_items))
            if use_adp and g_adp is not None:
                adam_adp.step(branch_adp, g_adp)
                if config.clip_embeddings:
                    clip_embedding_rows(branch_adp,
                                        np.flatnonzero(g_adp.touched_users),
                                        np.flatnonzero(g_adp.touched_items))

            sum_conv += breakdown.margin_conv
            sum_adp += breakdown.margin_adp
            sum_l3 += breakdown.consistency

        model.history.append(EpochRecord(
            epoch=epoch,
            loss_conventional=sum_conv / steps_per_epoch if use_conv else None,
            loss_adaptive=sum_adp / steps_per_epoch if use_adp else None,
            loss_consistency=(sum_l3 / steps_per_epoch
                              if (use_conv and use_adp and not flags.drop_consistency_loss)
                              else None),
        ))
        if epoch_callback is not None:
            epoch_callback(epoch, model)

    return model
