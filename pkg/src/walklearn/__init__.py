"""Identity-verification pre-training from walking-video tracks, with context branches."""
from .estimators import AttributeClassifier, BranchFeatures
from .evaluator import ARMS, AblationResult, LinearSVM, fit_linear, run_ablation
from .model import ModelSpec, ParamStore
from .pair_miner import MiningConfig, PairSet, mine_pairs
from .pipeline import EvalConfig, PipelineConfig, pretrain_all
from .synthetic_world import WorldConfig, generate_world
from .track_store import SampleStore, load_store
from .trainer import TrainConfig, finetune_attributes, pretrain_verification, train_context_head

__version__ = "0.1.0"

__all__ = [
    "ARMS", "AblationResult", "AttributeClassifier", "BranchFeatures", "EvalConfig", "LinearSVM",
    "MiningConfig", "ModelSpec", "PairSet", "ParamStore", "PipelineConfig", "SampleStore",
    "TrainConfig", "WorldConfig", "finetune_attributes", "fit_linear", "generate_world",
    "load_store", "mine_pairs", "pretrain_all", "pretrain_verification", "run_ablation",
    "train_context_head",
]
