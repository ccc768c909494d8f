"""Ranking-based at-risk student prediction with federated learning and differential features."""

__version__ = "0.1.0"

from fedrisk.course_data import (
    ClientDataset,
    EventRecord,
    GradeRecord,
    GradeScoring,
    ingest_events,
    label_at_risk,
    score_grades,
    truncate_events,
)
from fedrisk.features import FeatureSpec, featurize
from fedrisk.federation import FederationConfig, fedavg, run_centralized, run_federated
from fedrisk.mlp import MlpConfig, ModelParams, init_params, predict_batch, train_epoch
from fedrisk.pairs import make_pairs, individual_scores, pair_cap
from fedrisk.ranking import RiskRanking, evaluate, make_ranking, ndcg, pr_auc, top_n_precision
from fedrisk.synth import SynthSpec, generate

__all__ = [
    "ClientDataset",
    "EventRecord",
    "FeatureSpec",
    "FederationConfig",
    "GradeRecord",
    "GradeScoring",
    "MlpConfig",
    "ModelParams",
    "RiskRanking",
    "SynthSpec",
    "evaluate",
    "featurize",
    "fedavg",
    "generate",
    "individual_scores",
    "ingest_events",
    "init_params",
    "label_at_risk",
    "make_pairs",
    "make_ranking",
    "ndcg",
    "pair_cap",
    "pr_auc",
    "predict_batch",
    "run_centralized",
    "run_federated",
    "score_grades",
    "top_n_precision",
    "train_epoch",
    "truncate_events",
]
