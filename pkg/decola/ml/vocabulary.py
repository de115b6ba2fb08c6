"""
Class-name embeddings t(y) that condition the detector.

The text encoder is replaced by a deterministic compositional provider: every
attribute token ("red", "circle", ...) owns a seeded random unit vector and a
class embedding is the normalized sum of its tokens. Novel classes therefore
share structure with the base classes that carry the same attributes.
"""
import hashlib
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from decola.errors import VocabularyError
from decola.utils.diagnostics import diagnostics

logger = logging.getLogger(__name__)

OBJECT_PHRASE = "an object"
OBJECT_TOKEN = "<an object>"
DEFAULT_DIM = 64


@dataclass(frozen=True)
class ClassEmbedding:
    name: str
    vector: np.ndarray
    attributes: Tuple[str, ...]
    provenance: str = "compositional"

    def __post_init__(self):
        vector = np.asarray(self.vector, dtype=np.float64)
        vector.setflags(write=False)
        object.__setattr__(self, "vector", vector)

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


def tokenize(name: str) -> Tuple[str, ...]:
    return tuple(name.strip().lower().split())


def _token_vector(token: str, seed: int, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vector = rng.standard_normal(dim)
    return vector / np.linalg.norm(vector)


@dataclass(frozen=True)
class Vocabulary:
    classes: Tuple[str, ...]
    split: Dict[str, str]
    seed: int
    dim: int = DEFAULT_DIM
    attribute_basis: Dict[str, np.ndarray] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(set(self.classes)) != len(self.classes):
            raise VocabularyError("Duplicate class names in vocabulary")
        unknown = sorted(set(self.split) - set(self.classes))
        if unknown:
            raise VocabularyError(f"Split names classes outside the vocabulary: {unknown}", token=unknown[0])
        missing = [c for c in self.classes if self.split.get(c) not in ("base", "novel")]
        if missing:
            raise VocabularyError(f"Classes without a base/novel split: {missing}", token=missing[0])

        tokens = {OBJECT_TOKEN}
        for name in self.classes:
            tokens.update(tokenize(name))
        basis = {token: _token_vector(token, self.seed, self.dim) for token in sorted(tokens)}
        object.__setattr__(self, "attribute_basis", basis)

    @property
    def base_classes(self) -> List[str]:
        return [c for c in self.classes if self.split[c] == "base"]

    @property
    def novel_classes(self) -> List[str]:
        return [c for c in self.classes if self.split[c] == "novel"]

    def class_id(self, name: str) -> int:
        return self.classes.index(name)

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "split": {"base": self.base_classes, "novel": self.novel_classes},
            "seed": self.seed,
        }

    def content_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data: dict, dim: int = DEFAULT_DIM) -> "Vocabulary":
        try:
            split = {name: "base" for name in data["split"].get("base", [])}
            split.update({name: "novel" for name in data["split"].get("novel", [])})
            overlap = set(data["split"].get("base", [])) & set(data["split"].get("novel", []))
            if overlap:
                raise VocabularyError(f"Classes in both base and novel: {sorted(overlap)}", token=sorted(overlap)[0])
            return cls(classes=tuple(data["classes"]), split=split, seed=int(data["seed"]), dim=dim)
        except KeyError as e:
            raise VocabularyError(f"Vocabulary file is missing field {e}") from e

    @classmethod
    def from_file(cls, path: str, dim: int = DEFAULT_DIM) -> "Vocabulary":
        with open(path) as f:
            vocabulary = cls.from_dict(json.load(f), dim=dim)
        logger.info(f"Loaded vocabulary with {len(vocabulary.classes)} classes from {path}")
        return vocabulary

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


class EmbeddingProvider(ABC):
    """Source of t(y); a learned text encoder can replace the compositional one"""

    @abstractmethod
    def embed(self, name: str) -> ClassEmbedding:
        ...

    @abstractmethod
    def embed_object_phrase(self) -> ClassEmbedding:
        ...

    def embed_all(self, names: Iterable[str]) -> List[ClassEmbedding]:
        return [self.embed(name) for name in names]


class CompositionalEmbeddingProvider(EmbeddingProvider):
    def __init__(self, vocabulary: Vocabulary):
        self.vocabulary = vocabulary
        self._provenance = f"compositional:seed={vocabulary.seed}:dim={vocabulary.dim}"

    def embed(self, name: str) -> ClassEmbedding:
        tokens = tokenize(name)
        if not tokens:
            raise VocabularyError("Empty class name", token="")
        basis = self.vocabulary.attribute_basis
        for token in tokens:
            if token not in basis or token == OBJECT_TOKEN:
                raise VocabularyError(f"Unknown attribute token '{token}' in class name '{name}'", token=token)
        vector = np.sum([basis[token] for token in tokens], axis=0)
        return ClassEmbedding(name, vector / np.linalg.norm(vector), tokens, self._provenance)

    def embed_object_phrase(self) -> ClassEmbedding:
        vector = self.vocabulary.attribute_basis[OBJECT_TOKEN]
        return ClassEmbedding(OBJECT_PHRASE, vector.copy(), (OBJECT_TOKEN,), self._provenance)


def embed_class(v: Vocabulary, name: str) -> ClassEmbedding:
    return CompositionalEmbeddingProvider(v).embed(name)


def embed_object_phrase(v: Vocabulary) -> ClassEmbedding:
    return CompositionalEmbeddingProvider(v).embed_object_phrase()


def embedding_matrix(embeddings: Sequence[ClassEmbedding]) -> np.ndarray:
    return np.stack([e.vector for e in embeddings]) if embeddings else np.zeros((0, DEFAULT_DIM))


def similarity_matrix(e: Sequence[ClassEmbedding], f: np.ndarray) -> np.ndarray:
    """Entry (y, j) = cosine(f_j, t(y)); zero-norm features score 0"""
    features = np.asarray(f, dtype=np.float64)
    if features.ndim == 1:
        features = features[None, :]
    text = embedding_matrix(e)
    if features.shape[0] and text.shape[0] and features.shape[1] != text.shape[1]:
        raise VocabularyError(f"Dimension mismatch: features {features.shape[1]} vs embeddings {text.shape[1]}")
    norms = np.linalg.norm(features, axis=1)
    zero = norms == 0
    if zero.any():
        diagnostics.increment("zero_norm_feature", int(zero.sum()), site="similarity_matrix")
    unit = features / np.where(zero, 1.0, norms)[:, None]
    text = text / np.linalg.norm(text, axis=1, keepdims=True)
    return np.clip(text @ unit.T, -1.0, 1.0)
