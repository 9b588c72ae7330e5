"""Concept unlearning on a tiny language model by suppressing sparse-autoencoder features."""

from crisp.config import RunConfig, __version__, load_config, parse_config
from crisp.corpus import Corpora, CorpusSpec, gen_corpora
from crisp.evaluate import EvalReport, evaluate, overall_score
from crisp.lm import LmConfig, LoraAdapter, TinyLM, init_lm, merge_lora, train_lm
from crisp.pipeline import run_pipeline
from crisp.sae import SaeParams, SaeTrainConfig, train_sae
from crisp.selection import FeatureStats, SalientSet, build_salient_set, classify_features, select_salient
from crisp.sweep import SweepPoint, pareto_envelope, run_sweep
from crisp.unlearn import LossWeights, RmuConfig, UnlearnConfig, train_crisp, train_rmu

__all__ = [
    "Corpora", "CorpusSpec", "EvalReport", "FeatureStats", "LmConfig", "LoraAdapter", "LossWeights", "RmuConfig",
    "RunConfig", "SaeParams", "SaeTrainConfig", "SalientSet", "SweepPoint", "TinyLM", "UnlearnConfig",
    "__version__", "build_salient_set", "classify_features", "evaluate", "gen_corpora", "init_lm", "load_config",
    "merge_lora", "overall_score", "pareto_envelope", "parse_config", "run_pipeline", "run_sweep", "select_salient",
    "train_crisp", "train_lm", "train_rmu", "train_sae",
]
