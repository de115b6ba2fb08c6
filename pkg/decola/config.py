"""
Configuration settings for DECOLA
"""
import json
import logging
import logging.config
import math
import os
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    # Runtime
    DECOLA_THREADS: int = 1
    RUNS_DIR: str = "./runs"
    LOG_LEVEL: str = "INFO"

    # API
    API_HOST: str = "0.0.0.0"
    API_PORT: int = 8000
    API_RELOAD: bool = False
    CORS_ORIGINS: List[str] = ["http://localhost:3000", "http://localhost:5173"]

    # Served model
    CHECKPOINT_PATH: str = "./runs/phase2/ckpt-final.bin"
    VOCABULARY_PATH: str = "./runs/data/vocabulary.json"
    DETECTION_LIMIT: int = 100

    class Config:
        env_file = ".env"
        case_sensitive = True


settings = Settings()

LOGGING_CONFIG = os.path.join(os.path.dirname(__file__), "logging.ini")


def configure_logging(level: Optional[str] = None) -> None:
    logging.config.fileConfig(LOGGING_CONFIG, disable_existing_loggers=False)
    logging.getLogger("decola").setLevel((level or settings.LOG_LEVEL).upper())


class ModelConfig(BaseModel):
    embed_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 3
    num_heads: int = 4
    ffn_dim: int = 1024
    dropout: float = 0.0
    num_levels: int = 3
    stem_channels: Tuple[int, int] = (32, 48)
    queries_per_class: int = 20
    queries_per_class_full_scale: int = 300  # natural-image setting, recorded only
    open_vocab_queries: int = 50
    temperature: float = 50.0
    bias_init: float = -math.log(0.99 / 0.01)
    anchor_scale: float = 0.1
    # Phase 2 / baseline only: "object_phrase" conditions on "an object", "learned" uses <x, w>
    query_selection: Literal["object_phrase", "learned"] = "object_phrase"
    # Phase 1 only: "single" conditioned score, "multi" scores over the whole vocabulary
    second_stage: Literal["single", "multi"] = "single"

    @model_validator(mode="after")
    def _check_heads(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim must be divisible by num_heads (got {self.embed_dim} and {self.num_heads})"
            )
        return self


class OptimizerConfig(BaseModel):
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    decay_milestones: List[float] = [0.8]  # fractions of the step budget
    decay_factor: float = 0.1
    grad_clip_value: float = 0.01
    grad_clip_norm_type: float = 2.0

    @field_validator("decay_milestones")
    @classmethod
    def _sorted_fractions(cls, value: List[float]) -> List[float]:
        if any(not 0.0 < m < 1.0 for m in value) or value != sorted(value):
            raise ValueError("decay_milestones must be increasing fractions in (0, 1)")
        return value


class LossConfig(BaseModel):
    cls_weight: float = 2.0
    giou_weight: float = 2.0
    l1_weight: float = 5.0
    first_stage_topk: int = 1000
    first_stage_topk_full_scale: int = 10000
    first_stage_negative_weight: float = 1.0
    federated_fraction: float = 0.5
    pseudo_box_loss: bool = True


class DataConfig(BaseModel):
    data_dir: str = "./runs/data"
    vocabulary: str = "vocabulary.json"
    train_manifest: str = "train.json"
    val_manifest: str = "val.json"
    weak_manifest: str = "weak.json"
    pseudo_manifest: Optional[str] = None
    resolutions: List[int] = [32, 48, 64]
    resolutions_full_scale: List[int] = [240, 280, 320, 360, 400]
    mix_ratio: Tuple[int, int] = (1, 4)
    batch_size: int = 4
    topj: int = 1
    min_score: float = 0.0

    def path(self, name: Optional[str]) -> Optional[str]:
        if name is None:
            return None
        return name if os.path.isabs(name) else os.path.join(self.data_dir, name)


class RunConfig(BaseModel):
    seed: int = 7
    phase: Literal[1, 2] = 1
    run_dir: Optional[str] = None  # default: <RUNS_DIR>/phase<phase>
    steps: int = 2000
    checkpoint_every: int = 500
    eval_every: int = 500
    log_every: int = 50
    eval_k: List[int] = [10, 20, 50, 100, 300]
    eval_n: List[int] = [1, 2, 5, 10, 20]
    iou_threshold: float = 0.5
    phase1_checkpoint: Optional[str] = None
    resume_from: Optional[str] = None
    evaluation_vocabulary: Optional[List[str]] = None
    model: ModelConfig = Field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    data: DataConfig = Field(default_factory=DataConfig)

    @model_validator(mode="after")
    def _default_run_dir(self):
        if self.run_dir is None:
            self.run_dir = os.path.join(settings.RUNS_DIR, f"phase{self.phase}")
        return self

    @classmethod
    def load(cls, path: Optional[str] = None, **overrides) -> "RunConfig":
        """Load a JSON config file and apply dotted-key overrides (`model.embed_dim=32`)"""
        raw = {}
        if path:
            with open(path) as f:
                raw = json.load(f)
        for key, value in overrides.items():
            if value is None:
                continue
            target = raw
            parts = key.split(".")
            for part in parts[:-1]:
                target = target.setdefault(part, {})
            target[parts[-1]] = value
        return cls.model_validate(raw)

    def resolved_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    def write_resolved(self) -> str:
        os.makedirs(self.run_dir, exist_ok=True)
        path = os.path.join(self.run_dir, "config.resolved.json")
        with open(path, "w") as f:
            f.write(self.resolved_json())
        return path
