"""
Experiment configuration.

Configs are JSON files validated by pydantic; unknown keys are rejected so a
typo in a sweep definition fails loudly instead of being ignored.
"""

import os
import json
import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator

from mrdd.services.masking import MaskSpec

load_dotenv()

logger = logging.getLogger(__name__)

# fields that do not change results and are left out of the config hash
NON_SEMANTIC_FIELDS = {"output_dir", "device", "max_parallel"}


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class StageConfig(StrictModel):
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(512, ge=1)
    lr: float = Field(5e-4, gt=0)
    scheduler: Literal["cosine", "none"] = "cosine"
    # 0 writes only the final checkpoint
    checkpoint_every: int = Field(0, ge=0)


class LossWeights(StrictModel):
    beta_c: float = Field(1.0, ge=0)
    beta_s: float = Field(1.0, ge=0)
    lambda_d: float = Field(1.0, ge=0)
    lambda_r: float = Field(1.0, ge=0)


class NetConfig(StrictModel):
    base_channels: int = Field(16, ge=1)
    dropout: float = Field(0.1, ge=0, lt=1)
    club_hidden: List[int] = Field(default_factory=lambda: [256, 256])
    fusion: Literal["concat", "poe"] = "concat"
    # take c at the posterior mean inside z^i unless set
    sample_c: bool = False


class MineConfig(StrictModel):
    hidden: List[int] = Field(default_factory=lambda: [100, 100, 100])
    lr: float = Field(1e-4, gt=0)
    batch_size: int = Field(128, ge=2)
    epochs: int = Field(500, ge=1)
    repeats: int = Field(10, ge=1)
    ema: bool = True
    ema_decay: float = Field(0.99, ge=0, lt=1)
    # fraction of rows held out, split evenly into validation and test parts
    holdout: float = Field(0.3, gt=0, le=0.5)
    tail_epochs: int = Field(10, ge=1)
    patience: int = Field(50, ge=1)
    max_restarts: int = Field(3, ge=0)

    @field_validator("hidden")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("statistics network needs at least one hidden layer")
        return v


class EvalConfig(StrictModel):
    runs: int = Field(10, ge=1)
    kmeans_max_iter: int = Field(300, ge=1)
    svm_c: float = Field(1.0, gt=0)
    selectors: List[str] = Field(default_factory=lambda: ["c", "cs1"])


class ExperimentConfig(StrictModel):
    name: str = "mrdd"
    dataset: str
    d_c: int = Field(10, ge=1)
    d_s: int = Field(10, ge=1)
    mask: MaskSpec = Field(default_factory=MaskSpec)
    stage1: StageConfig = Field(default_factory=StageConfig)
    stage2: StageConfig = Field(default_factory=StageConfig)
    weights: LossWeights = Field(default_factory=LossWeights)
    nets: NetConfig = Field(default_factory=NetConfig)
    mine: MineConfig = Field(default_factory=MineConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    seed: int = 0
    # representation learning is unsupervised; "train" keeps test images unseen
    train_split: Literal["all", "train"] = "all"
    audit_mi: bool = True
    output_dir: Optional[str] = None
    device: str = "cpu"
    max_parallel: int = Field(1, ge=1)


def output_root() -> Path:
    return Path(os.getenv("MRDD_OUTPUT_ROOT", "runs"))


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    return ExperimentConfig.model_validate(data)


def save_config(config: ExperimentConfig, path: Union[str, Path]) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.model_dump(mode="json"), f, indent=2, sort_keys=True)
    logger.debug(f"Saved config {config_hash(config)[:12]} to {path}")
    return str(path)


def config_hash(config: Union[ExperimentConfig, Dict[str, Any]]) -> str:
    """SHA-256 of the canonical JSON form of the semantic config fields."""
    if isinstance(config, BaseModel):
        data = config.model_dump(mode="json")
    else:
        data = ExperimentConfig.model_validate(config).model_dump(mode="json")
    data = {k: v for k, v in data.items() if k not in NON_SEMANTIC_FIELDS}
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def override(config: ExperimentConfig, updates: Dict[str, Any]) -> ExperimentConfig:
    """Apply dotted-key overrides ({"mask.ratio": 0.0}) and revalidate."""
    data = config.model_dump(mode="json")
    for dotted, value in updates.items():
        node = data
        keys = dotted.split(".")
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ValueError(f"Unknown config section '{key}' in override '{dotted}'")
            node = node[key]
        if keys[-1] not in node:
            raise ValueError(f"Unknown config key '{dotted}'")
        node[keys[-1]] = value
    return ExperimentConfig.model_validate(data)
