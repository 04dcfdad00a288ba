"""End-to-end pre-training chain shared by the ablation runner and the CLI."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .model import ModelSpec
from .pair_miner import MiningConfig, mine_pairs
from .synthetic_world import WorldConfig, generate_world
from .track_store import ContextLabelSpec
from .trainer import TrainConfig, pretrain_verification, train_context_head

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalConfig:
    svm_lambda: float = 1e-3
    svm_epochs: int = 60
    linear_test_fraction: float = 0.5
    finetune_test_fraction: float = 0.2
    finetune_label_fraction: float = 0.1
    finetune_epochs: int = 100
    finetune_batch_size: int = 8
    finetune_momentum: float = 0.0
    finetune_lr_scratch: float = 1e-3
    finetune_lr_pretrained: float = 1e-4
    finetune_top_multiplier: float = 10.0
    path: str = "linear"

    def __post_init__(self):
        if self.path not in ("linear", "finetune", "both"):
            raise ValueError(f"unknown evaluation path {self.path!r}")
        for name in ("linear_test_fraction", "finetune_test_fraction", "finetune_label_fraction"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")


@dataclass(frozen=True)
class PipelineConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    labels: ContextLabelSpec = field(default_factory=ContextLabelSpec)
    mining: MiningConfig = field(default_factory=lambda: MiningConfig(max_pos_per_track=5))
    model: ModelSpec = field(default_factory=ModelSpec)
    verification: TrainConfig = field(default_factory=lambda: TrainConfig(lr_global=0.01, epochs=30))
    context: TrainConfig = field(default_factory=lambda: TrainConfig(lr_global=0.01, epochs=30,
                                                                     stage="context_geo"))
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_seed(self, seed):
        """Same configuration with every stage re-seeded from one world seed."""
        return replace(
            self,
            world=replace(self.world, seed=seed),
            mining=replace(self.mining, seed=seed),
            verification=replace(self.verification, seed=seed),
            context=replace(self.context, seed=seed),
        )


@dataclass
class PretrainedBundle:
    store: object
    truth: object
    pairs: object
    branches: dict
    reports: dict


def pretrain_all(cfg, heads=("geo", "weather")):
    """World -> pairs -> verification -> independent context heads."""
    store, truth = generate_world(cfg.world, cfg.labels)
    regions = cfg.world.regions
    pairs = mine_pairs(store, cfg.mining, regions)
    log.info("seed %d: %d samples, %d pairs", cfg.world.seed, len(store), len(pairs))
    verif, rep_v = pretrain_verification(store, pairs, cfg.model, cfg.verification)
    branches, reports = {"id": verif}, {"verification": rep_v}
    label_sets = {"geo": store.geo_labels(regions), "weather": store.weather_labels(cfg.labels)}
    for head in heads:
        p, rep = train_context_head(verif, store, head, cfg.context, label_sets[head])
        branches[head], reports[f"context_{head}"] = p, rep
    return PretrainedBundle(store, truth, pairs, branches, reports)
