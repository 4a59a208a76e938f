from .ratings import load_ratings, load_test_ratings, write_ratings
from .splits import build_unbiased_validation, split_hyper_validation, build_splits
from .synthetic import generate_semi_synthetic
from .model import FactorModel, init_model, predict_relevance, relevance_score
from .exposure import ExposureParams, PopularityTable, compute_popularity, estimate_exposure, gate
from .trainers import (
    train_ubo,
    train_jointopt,
    train_alteropt,
    train_biopt2,
    train_relmf,
    train_umf,
    train_naive
)
from .metrics import evaluate
from .pipeline import ExperimentPipeline

__all__ = [
    'load_ratings',
    'load_test_ratings',
    'write_ratings',
    'build_unbiased_validation',
    'split_hyper_validation',
    'build_splits',
    'generate_semi_synthetic',
    'FactorModel',
    'init_model',
    'predict_relevance',
    'relevance_score',
    'ExposureParams',
    'PopularityTable',
    'compute_popularity',
    'estimate_exposure',
    'gate',
    'train_ubo',
    'train_jointopt',
    'train_alteropt',
    'train_biopt2',
    'train_relmf',
    'train_umf',
    'train_naive',
    'evaluate',
    'ExperimentPipeline'
]
