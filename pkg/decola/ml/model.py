"""
Two-stage language-conditioned detector and its checkpoint format
"""
import hashlib
import io
import json
import logging
import os
import zipfile
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import tensorflow as tf

from decola.config import ModelConfig
from decola.errors import CheckpointError
from decola.ml.decoder import Decoder, DecoderMode, DecoderOutput, DetectionSet, to_detections
from decola.ml.encoder import ImageEncoder, FlatGrid, flatten_grid
from decola.ml.layers import MLP
from decola.ml.selection import (
    LEARNED_OBJECTNESS,
    ConditionedQueryBatch,
    build_classic_queries,
    build_conditioned_queries,
    proposal_boxes,
    score_classic,
    score_conditioned,
)
from decola.ml.vocabulary import OBJECT_PHRASE, ClassEmbedding, CompositionalEmbeddingProvider, Vocabulary
from decola.schemas import CheckpointHeader, VariableEntry, VocabularySpec

logger = logging.getLogger(__name__)

FIXED_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def seed_everything(seed: int, threads: int = 1) -> None:
    """Seed python/numpy/tf and pin TF to deterministic single-threaded kernels"""
    tf.keras.utils.set_random_seed(seed)
    tf.config.experimental.enable_op_determinism()
    try:
        tf.config.threading.set_inter_op_parallelism_threads(threads)
        tf.config.threading.set_intra_op_parallelism_threads(threads)
    except RuntimeError:
        # already initialized in this process
        pass


@dataclass
class ForwardOutput:
    grid: FlatGrid
    proposals: tf.Tensor  # [M, 4] CXCYWH, differentiable
    first_stage_logits: Dict[str, tf.Tensor]  # conditioning key -> [M]
    queries: ConditionedQueryBatch
    output: DecoderOutput


class DecolaDetector(tf.keras.Model):
    """
    Grid encoder, first-stage box regression, conditioned query selection and
    the refinement decoder. Phase 1 conditions on class names; Phase 2 conditions
    on "an object" (or a learned objectness vector) and classifies over a vocabulary.
    """

    def __init__(self, config: ModelConfig, vocabulary: Vocabulary, phase: int = 1, **kwargs):
        super().__init__(**kwargs)
        if config.embed_dim != vocabulary.dim:
            raise CheckpointError(
                f"Model dim {config.embed_dim} does not match embedding dim {vocabulary.dim}"
            )
        self.config = config
        self.vocabulary = vocabulary
        self.phase = phase
        self.provider = CompositionalEmbeddingProvider(vocabulary)
        self.encoder = ImageEncoder(
            embed_dim=config.embed_dim,
            num_levels=config.num_levels,
            num_layers=config.encoder_layers,
            num_heads=config.num_heads,
            ffn_dim=config.ffn_dim,
            dropout=config.dropout,
            stem_channels=tuple(config.stem_channels),
            name="encoder",
        )
        self.first_stage_bbox = MLP(config.embed_dim, 4, 3, zero_last=True, name="first_stage_bbox")
        self.first_stage_bias = self.add_weight(
            name="first_stage_bias",
            shape=(),
            initializer=tf.keras.initializers.Constant(config.bias_init),
        )
        self.objectness = self.add_weight(
            name="objectness",
            shape=(config.embed_dim,),
            initializer=tf.keras.initializers.RandomNormal(stddev=0.02),
        )
        self.decoder = Decoder(
            embed_dim=config.embed_dim,
            num_layers=config.decoder_layers,
            num_heads=config.num_heads,
            ffn_dim=config.ffn_dim,
            dropout=config.dropout,
            temperature=config.temperature,
            bias_init=config.bias_init,
            name="decoder",
        )
        self._build_variables()

    def _build_variables(self) -> None:
        """One dummy pass so every variable exists in a fixed creation order"""
        image = np.random.default_rng(0).random((64, 64, 3)).astype(np.float32)
        self.forward(image, [self.vocabulary.classes[0]], budget=1)

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def embed(self, names: Sequence[str]) -> List[ClassEmbedding]:
        return self.provider.embed_all(names)

    def first_stage_logits(self, features: tf.Tensor, embedding: ClassEmbedding) -> tf.Tensor:
        return self.config.temperature * score_conditioned(features, embedding) + self.first_stage_bias

    def forward(
        self,
        image: np.ndarray,
        class_names: Optional[Sequence[str]] = None,
        budget: Optional[int] = None,
        vocabulary: Optional[Sequence[str]] = None,
        training: bool = False,
    ) -> ForwardOutput:
        """
        `class_names` given: conditioned inference on exactly those classes
        (Phase 1). Otherwise: open-vocabulary inference scored over `vocabulary`
        (default: every class of the model vocabulary).
        """
        grid = flatten_grid(self.encoder.encode_image(image, training=training), self.config.anchor_scale)
        deltas = self.first_stage_bbox(grid.features)
        proposals = proposal_boxes(grid, deltas, grid.features.dtype)

        if class_names is not None:
            n = min(budget or self.config.queries_per_class, len(grid))
            embeddings = self.embed(list(dict.fromkeys(class_names)))
            queries = build_conditioned_queries(grid, embeddings, n, deltas, self.config.anchor_scale)
            logits = {e.name: self.first_stage_logits(grid.features, e) for e in embeddings}
            if self.config.second_stage == "multi":
                mode = DecoderMode.CONDITIONED_MULTICLASS
                class_embeddings = self.embed(vocabulary or self.vocabulary.classes)
            else:
                mode = DecoderMode.CONDITIONED_BINARY
                class_embeddings = None
        else:
            n = min(budget or self.config.open_vocab_queries, len(grid))
            if self.config.query_selection == "learned":
                queries = build_classic_queries(grid, self.objectness, n, deltas, self.config.anchor_scale)
                logits = {LEARNED_OBJECTNESS: score_classic(grid.features, self.objectness) + self.first_stage_bias}
            else:
                # "an object" stays frozen: its embedding is a constant, not a variable
                phrase = self.provider.embed_object_phrase()
                queries = build_conditioned_queries(grid, [phrase], n, deltas, self.config.anchor_scale)
                logits = {OBJECT_PHRASE: self.first_stage_logits(grid.features, phrase)}
            mode = DecoderMode.OPEN_VOCAB_MULTICLASS
            class_embeddings = self.embed(vocabulary or self.vocabulary.classes)

        output = self.decoder.decode(queries, grid, mode, class_embeddings, training=training)
        return ForwardOutput(grid, proposals, logits, queries, output)

    def detect(
        self,
        image: np.ndarray,
        class_names: Optional[Sequence[str]] = None,
        limit_k: int = 100,
        budget: Optional[int] = None,
        vocabulary: Optional[Sequence[str]] = None,
    ) -> DetectionSet:
        image = np.asarray(image)
        forward = self.forward(image, class_names, budget=budget, vocabulary=vocabulary)
        return to_detections(forward.output, limit_k, (int(image.shape[0]), int(image.shape[1])))

    def call(self, inputs, training=False):
        return self.forward(inputs, training=training)

    def parameter_digest(self) -> str:
        digest = hashlib.sha256()
        for variable in self.weights:
            digest.update(np.ascontiguousarray(variable.numpy()).tobytes())
        return digest.hexdigest()


def _strip_scope(name: str) -> str:
    # drop the uniquified model prefix ("decola_detector_3/...") and the ":0" suffix
    name = name.split(":")[0]
    return name.split("/", 1)[1] if "/" in name else name


def _entries(variables) -> List[VariableEntry]:
    return [
        VariableEntry(name=_strip_scope(v.name), shape=list(v.shape), dtype=v.dtype.name)
        for v in variables
    ]


def _write_npy(archive: zipfile.ZipFile, name: str, value: np.ndarray) -> None:
    buffer = io.BytesIO()
    np.save(buffer, value, allow_pickle=False)
    info = zipfile.ZipInfo(name, date_time=FIXED_ZIP_TIME)
    info.compress_type = zipfile.ZIP_DEFLATED
    archive.writestr(info, buffer.getvalue())


def save_checkpoint(
    model: DecolaDetector,
    path: str,
    step: int,
    seed: int,
    optimizer: Optional[tf.keras.optimizers.Optimizer] = None,
) -> CheckpointHeader:
    optimizer_variables = list(optimizer.variables) if optimizer is not None else []
    header = CheckpointHeader(
        mode=f"phase{model.phase}",
        d=model.config.embed_dim,
        D=model.config.decoder_layers,
        n=model.config.queries_per_class,
        vocabulary_hash=model.vocabulary.content_hash(),
        vocabulary=VocabularySpec(**model.vocabulary.to_dict()),
        seed=seed,
        step=step,
        param_digest=model.parameter_digest(),
        model=model.config.model_dump(mode="json"),
        variables=_entries(model.weights),
        optimizer_variables=_entries(optimizer_variables),
    )
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with zipfile.ZipFile(tmp_path, "w") as archive:
        info = zipfile.ZipInfo("header.json", date_time=FIXED_ZIP_TIME)
        archive.writestr(info, json.dumps(header.model_dump(mode="json"), indent=2, sort_keys=True))
        for i, variable in enumerate(model.weights):
            _write_npy(archive, f"model/{i:05d}.npy", variable.numpy())
        for i, variable in enumerate(optimizer_variables):
            _write_npy(archive, f"optimizer/{i:05d}.npy", variable.numpy())
    os.replace(tmp_path, path)
    logger.info(f"Saved checkpoint step {step} to {path}")
    return header


def read_header(path: str) -> CheckpointHeader:
    try:
        with zipfile.ZipFile(path) as archive:
            return CheckpointHeader.model_validate_json(archive.read("header.json"))
    except (OSError, KeyError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"Error reading checkpoint: {str(e)}", path=path)


def _read_arrays(archive: zipfile.ZipFile, prefix: str, count: int) -> List[np.ndarray]:
    return [np.load(io.BytesIO(archive.read(f"{prefix}/{i:05d}.npy")), allow_pickle=False) for i in range(count)]


def _assign(variables, arrays: List[np.ndarray], what: str) -> None:
    if len(variables) != len(arrays):
        raise CheckpointError(f"{what}: checkpoint has {len(arrays)} variables, expected {len(variables)}")
    for variable, array in zip(variables, arrays):
        if tuple(variable.shape) != array.shape:
            raise CheckpointError(
                f"{what}: shape mismatch for {_strip_scope(variable.name)}: "
                f"{tuple(variable.shape)} vs {array.shape}"
            )
        variable.assign(array)


def load_weights(model: DecolaDetector, path: str, optimizer: Optional[tf.keras.optimizers.Optimizer] = None) -> CheckpointHeader:
    """Restore parameters (and optimizer slots when given) into an existing model"""
    header = read_header(path)
    with zipfile.ZipFile(path) as archive:
        _assign(model.weights, _read_arrays(archive, "model", len(header.variables)), "model")
        if optimizer is not None and header.optimizer_variables:
            optimizer.build(model.trainable_variables)
            arrays = _read_arrays(archive, "optimizer", len(header.optimizer_variables))
            _assign(list(optimizer.variables), arrays, "optimizer")
    if model.parameter_digest() != header.param_digest:
        raise CheckpointError(f"Parameter digest mismatch after loading {path}")
    logger.info(f"Loaded checkpoint step {header.step} from {path}")
    return header


def load_checkpoint(
    path: str,
    phase: Optional[int] = None,
    model_overrides: Optional[dict] = None,
) -> DecolaDetector:
    """Build a detector from the checkpoint header and restore its parameters"""
    header = read_header(path)
    config = ModelConfig.model_validate({**header.model, **(model_overrides or {})})
    vocabulary = Vocabulary.from_dict(header.vocabulary.model_dump(), dim=header.d)
    if vocabulary.content_hash() != header.vocabulary_hash:
        raise CheckpointError("Vocabulary hash in checkpoint header does not match its vocabulary", path=path)
    model = DecolaDetector(config, vocabulary, phase=phase or int(header.mode[-1]))
    load_weights(model, path)
    return model


def labeler_hash(path: str) -> str:
    """Short identifier of the parameters stored in a checkpoint"""
    return read_header(path).param_digest[:16]
