"""Diversified top-K recommendation with a bilateral-branch metric model."""

__version__ = "0.1.0"

from .corpus import (
    DiversityProfile,
    InteractionCorpus,
    MissingCategoryError,
    build_diversity_profile,
    ingest,
    load_dataset,
    skewness,
    split,
    user_diversity,
)
from .gradients import (
    BatchNoise,
    CheckInstance,
    GradientSet,
    finite_difference_check,
    loss_and_gradients,
)
from .metrics import MetricReport, RankedList, evaluate, f_score
from .model import (
    AspectProfiles,
    BranchParameters,
    RankingScorer,
    RelationOutput,
    build_aspect_profiles,
    diversity_relation,
    init_branch,
    relevance_relation,
    score_for_ranking,
    two_way_distance,
)
from .objective import AblationFlags, alpha, branch_weights, consistency_loss, margin_loss
from .sampling import ReversedSampler, TrainingBatch, UniformSampler, draw_negatives, reversed_category_probs
from .training import TrainConfig, TrainedModel, TrainingDivergedError, train
from .baselines import CmlParameters, mmr_rerank, train_cml

__all__ = [
    "AblationFlags",
    "AspectProfiles",
    "BatchNoise",
    "BranchParameters",
    "CheckInstance",
    "CmlParameters",
    "DiversityProfile",
    "GradientSet",
    "InteractionCorpus",
    "MetricReport",
    "MissingCategoryError",
    "RankedList",
    "RankingScorer",
    "RelationOutput",
    "TrainConfig",
    "TrainedModel",
    "TrainingBatch",
    "TrainingDivergedError",
    "UniformSampler",
    "ReversedSampler",
    "alpha",
    "branch_weights",
    "build_aspect_profiles",
    "build_diversity_profile",
    "consistency_loss",
    "diversity_relation",
    "draw_negatives",
    "evaluate",
    "f_score",
    "finite_difference_check",
    "ingest",
    "init_branch",
    "load_dataset",
    "loss_and_gradients",
    "margin_loss",
    "mmr_rerank",
    "relevance_relation",
    "reversed_category_probs",
    "score_for_ranking",
    "skewness",
    "split",
    "train",
    "train_cml",
    "two_way_distance",
    "user_diversity",
]
