"""
Wire formats: dataset manifests, pseudo annotations, reports and checkpoint headers
"""
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

Split = Literal["train", "val", "weak"]
BOX_TOLERANCE = 1e-6


class VocabularySpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    classes: List[str]
    split: Dict[Literal["base", "novel"], List[str]]
    seed: int


class ImageRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: int
    file_name: str
    height: int = Field(gt=0)
    width: int = Field(gt=0)
    tags: List[str] = Field(default_factory=list)


class Annotation(BaseModel):
    """One box in original-image pixels (XYXY); score/resolution/labeler only on pseudo boxes"""

    model_config = ConfigDict(extra="forbid")

    image_id: int
    category: str
    bbox: List[float] = Field(min_length=4, max_length=4)
    score: Optional[float] = None
    resolution_h: Optional[int] = None
    labeler: Optional[str] = None


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    split: Split
    source: Literal["human", "pseudo"] = "human"
    vocabulary: VocabularySpec
    image_root: str = "images"
    images: List[ImageRecord] = Field(default_factory=list)
    annotations: List[Annotation] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_contents(self):
        classes = set(self.vocabulary.classes)
        sizes: Dict[int, ImageRecord] = {}
        for i, image in enumerate(self.images):
            if image.id in sizes:
                raise ValueError(f"images.{i}.id: duplicate image id {image.id}")
            sizes[image.id] = image
            for j, tag in enumerate(image.tags):
                if tag not in classes:
                    raise ValueError(f"images.{i}.tags.{j}: unknown class '{tag}'")
            if self.split == "weak" and not image.tags:
                raise ValueError(f"images.{i}.tags: weak images need at least one tag")

        if self.split == "weak" and self.annotations:
            raise ValueError("annotations.0: weak manifests carry tags only, not boxes")

        for i, ann in enumerate(self.annotations):
            if ann.category not in classes:
                raise ValueError(f"annotations.{i}.category: unknown class '{ann.category}'")
            image = sizes.get(ann.image_id)
            if image is None:
                raise ValueError(f"annotations.{i}.image_id: no image with id {ann.image_id}")
            x1, y1, x2, y2 = ann.bbox
            if not (x2 > x1 and y2 > y1):
                raise ValueError(f"annotations.{i}.bbox: degenerate box {ann.bbox}")
            if (
                x1 < -BOX_TOLERANCE or y1 < -BOX_TOLERANCE
                or x2 > image.width + BOX_TOLERANCE or y2 > image.height + BOX_TOLERANCE
            ):
                raise ValueError(f"annotations.{i}.bbox: box {ann.bbox} outside {image.width}x{image.height} image")
            if self.source == "pseudo":
                if ann.score is None or not 0.0 < ann.score <= 1.0:
                    raise ValueError(f"annotations.{i}.score: pseudo boxes need a score in (0, 1]")
                if ann.resolution_h is None:
                    raise ValueError(f"annotations.{i}.resolution_h: pseudo boxes need a resolution")
        return self

    def image(self, image_id: int) -> ImageRecord:
        for record in self.images:
            if record.id == image_id:
                return record
        raise KeyError(image_id)

    def annotations_by_image(self) -> Dict[int, List[Annotation]]:
        grouped: Dict[int, List[Annotation]] = {image.id: [] for image in self.images}
        for ann in self.annotations:
            grouped[ann.image_id].append(ann)
        return grouped


class HiddenGroundTruth(BaseModel):
    """Sidecar with the boxes of a weak manifest; only the pseudo-label quality report reads it"""

    model_config = ConfigDict(extra="forbid")

    manifest: str
    annotations: List[Annotation]


class PseudoLabelFailure(BaseModel):
    image_id: int
    file_name: str
    reason: str


class PseudoLabelReport(BaseModel):
    labeler: str
    resolutions: List[int]
    images_total: int
    images_labeled: int
    annotations: int
    skipped_tags: int
    failures: List[PseudoLabelFailure] = Field(default_factory=list)


class EvalReport(BaseModel):
    mode: str
    iou_thresholds: List[float]
    budget_n: int
    detection_limit: int
    per_class_ap: Dict[str, Optional[float]]
    map: float
    group_ap: Dict[str, Optional[float]]
    c_map_at_k: Dict[str, float] = Field(default_factory=dict)
    c_map_at_n: Dict[str, float] = Field(default_factory=dict)
    c_ar_first: Optional[float] = None
    c_ar_second: Optional[float] = None
    monotone_in_k: Optional[bool] = None
    pseudo_label_quality: Optional[Dict[str, float]] = None
    diagnostics: Dict[str, int] = Field(default_factory=dict)


class VariableEntry(BaseModel):
    name: str
    shape: List[int]
    dtype: str


class CheckpointHeader(BaseModel):
    format_version: int = 1
    mode: Literal["phase1", "phase2"]
    d: int
    D: int
    n: int
    vocabulary_hash: str
    vocabulary: VocabularySpec
    seed: int
    step: int
    param_digest: str
    model: Dict[str, object]
    variables: List[VariableEntry]
    optimizer_variables: List[VariableEntry] = Field(default_factory=list)
