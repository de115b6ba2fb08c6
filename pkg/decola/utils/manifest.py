"""
Manifest IO, the hidden ground-truth sidecar and strong/pseudo dataset mixing
"""
import json
import logging
import os
from dataclasses import dataclass
from typing import Iterator, List, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError

from decola.errors import ManifestError
from decola.schemas import DatasetManifest, HiddenGroundTruth, ImageRecord
from decola.utils.diagnostics import diagnostics

logger = logging.getLogger(__name__)

HIDDEN_GT_SUFFIX = ".hidden-gt.json"


def hidden_gt_path(manifest_path: str) -> str:
    root, _ = os.path.splitext(manifest_path)
    return root + HIDDEN_GT_SUFFIX


def _field_path(error: ValidationError) -> Tuple[str, str]:
    first = error.errors()[0]
    message = first.get("msg", str(error))
    location = ".".join(str(part) for part in first.get("loc", ()))
    # semantic checks report their own path as "<path>: <message>"
    if not location and message.startswith("Value error, "):
        message = message[len("Value error, "):]
        if ": " in message:
            location, _ = message.split(": ", 1)
    return location, message


def _dump(model: BaseModel) -> str:
    return json.dumps(model.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def _read_json(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise ManifestError(f"Error reading manifest: {str(e)}", path=path)
    except json.JSONDecodeError as e:
        raise ManifestError(f"Manifest is not valid JSON: {str(e)}", path=path)


def load_manifest(path: str) -> DatasetManifest:
    if path.endswith(HIDDEN_GT_SUFFIX):
        raise ManifestError(f"Refusing to load hidden ground truth {path} as a manifest", path=path)
    try:
        return DatasetManifest.model_validate(_read_json(path))
    except ValidationError as e:
        location, message = _field_path(e)
        raise ManifestError(f"Invalid manifest {path}: {location}: {message}", field_path=location, path=path)


def save_manifest(m: DatasetManifest, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(_dump(m))


def save_hidden_gt(gt: HiddenGroundTruth, path: str) -> None:
    if not path.endswith(HIDDEN_GT_SUFFIX):
        raise ManifestError(f"Hidden ground truth must be written to a '*{HIDDEN_GT_SUFFIX}' file", path=path)
    with open(path, "w") as f:
        f.write(_dump(gt))


def load_hidden_gt(path: str) -> HiddenGroundTruth:
    """Accepts the sidecar path or the path of the manifest it belongs to"""
    if not path.endswith(HIDDEN_GT_SUFFIX):
        path = hidden_gt_path(path)
    try:
        return HiddenGroundTruth.model_validate(_read_json(path))
    except ValidationError as e:
        location, message = _field_path(e)
        raise ManifestError(f"Invalid hidden ground truth {path}: {message}", field_path=location, path=path)


def image_path(manifest_path: str, m: DatasetManifest, record: ImageRecord) -> str:
    root = m.image_root if os.path.isabs(m.image_root) else os.path.join(os.path.dirname(manifest_path), m.image_root)
    return os.path.join(root, record.file_name)


def assert_base_only(m: DatasetManifest) -> None:
    """Phase 1 loader audit: no novel-class box may reach training"""
    novel = set(m.vocabulary.split.get("novel", []))
    for i, ann in enumerate(m.annotations):
        if ann.category in novel:
            raise ManifestError(
                f"Novel class '{ann.category}' in a Phase 1 training manifest",
                field_path=f"annotations.{i}.category",
            )


@dataclass(frozen=True)
class SampleRef:
    source: str  # "strong" or "pseudo"
    image_id: int


def epoch_order(image_ids: List[int], rng: np.random.Generator) -> Iterator[int]:
    """Endless walk over `image_ids`, one fresh permutation per epoch"""
    while True:
        for index in rng.permutation(len(image_ids)):
            yield image_ids[int(index)]


def mix_datasets(
    strong: DatasetManifest,
    pseudo: DatasetManifest,
    ratio: Tuple[int, int] = (1, 4),
    seed: int = 0,
) -> Iterator[SampleRef]:
    """
    Endless sampling schedule: per cycle `ratio[0]` strong draws then `ratio[1]`
    pseudo draws, each source walking its own seeded permutation per epoch.
    """
    if strong.vocabulary != pseudo.vocabulary:
        raise ManifestError("Strong and pseudo manifests use different vocabularies", field_path="vocabulary")
    strong_count, pseudo_count = int(ratio[0]), int(ratio[1])
    if strong_count < 0 or pseudo_count < 0 or strong_count + pseudo_count == 0:
        raise ManifestError(f"Invalid dataset ratio {ratio}")
    if pseudo_count and not pseudo.images:
        diagnostics.increment("empty_pseudo_fallback", ratio=f"{strong_count}:{pseudo_count}")
        pseudo_count = 0
        strong_count = strong_count or 1
    if strong_count and not strong.images:
        raise ManifestError("Strong manifest has no images")

    strong_ids = epoch_order([r.id for r in strong.images], np.random.default_rng([seed, 0])) if strong_count else None
    pseudo_ids = epoch_order([r.id for r in pseudo.images], np.random.default_rng([seed, 1])) if pseudo_count else None

    def schedule() -> Iterator[SampleRef]:
        while True:
            for _ in range(strong_count):
                yield SampleRef("strong", next(strong_ids))
            for _ in range(pseudo_count):
                yield SampleRef("pseudo", next(pseudo_ids))

    return schedule()
