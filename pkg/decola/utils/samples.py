"""
Model-ready samples (image array + normalized ground truth) from manifests
"""
import logging
import threading
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from decola.ml.geometry import BoxFormat, BoxSet, convert_format
from decola.ml.image_processor import ImageProcessor
from decola.ml.matching import GroundTruth
from decola.schemas import Annotation, DatasetManifest
from decola.utils.manifest import image_path, load_manifest

logger = logging.getLogger(__name__)


@dataclass
class Sample:
    image_id: int
    image: np.ndarray  # H x W x 3 in [0, 1], possibly resized
    gt: GroundTruth  # normalized CXCYWH
    original_size: Tuple[int, int]
    resolution: Optional[int] = None

    @property
    def classes(self) -> List[str]:
        """Classes present, in first-appearance order"""
        return list(dict.fromkeys(self.gt.classes))

    def gt_xyxy(self) -> np.ndarray:
        return convert_format(BoxSet(self.gt.boxes, BoxFormat.CXCYWH), BoxFormat.XYXY).boxes


def annotations_to_gt(annotations: List[Annotation], original_size: Tuple[int, int]) -> GroundTruth:
    if not annotations:
        return GroundTruth(np.zeros((0, 4)), [])
    boxes = BoxSet.from_pixels([a.bbox for a in annotations], original_size)
    return GroundTruth(convert_format(boxes, BoxFormat.CXCYWH).boxes, [a.category for a in annotations])


class SampleLoader:
    """Loads and caches samples of one manifest; safe to share between worker threads"""

    def __init__(self, manifest_path: str, manifest: Optional[DatasetManifest] = None, processor: Optional[ImageProcessor] = None):
        self.manifest_path = manifest_path
        self.manifest = manifest or load_manifest(manifest_path)
        self.processor = processor or ImageProcessor()
        self._annotations = self.manifest.annotations_by_image()
        self._records = {record.id: record for record in self.manifest.images}
        self._cache: Dict[Tuple[int, Optional[int]], Sample] = {}
        self._lock = threading.Lock()

    @property
    def image_ids(self) -> List[int]:
        return [record.id for record in self.manifest.images]

    def resolutions(self, image_id: int) -> List[int]:
        return sorted({a.resolution_h for a in self._annotations[image_id] if a.resolution_h is not None})

    def annotations(self, image_id: int, resolution: Optional[int] = None) -> List[Annotation]:
        annotations = self._annotations[image_id]
        if resolution is not None and self.manifest.source == "pseudo":
            annotations = [a for a in annotations if a.resolution_h == resolution]
        return annotations

    def sample(self, image_id: int, resolution: Optional[int] = None) -> Sample:
        key = (image_id, resolution)
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            return cached
        record = self._records[image_id]
        array, original_size = self.processor.preprocess_image(
            image_path=image_path(self.manifest_path, self.manifest, record), resolution=resolution
        )
        sample = Sample(
            image_id=image_id,
            image=array,
            gt=annotations_to_gt(self.annotations(image_id, resolution), original_size),
            original_size=original_size,
            resolution=resolution,
        )
        with self._lock:
            self._cache[key] = sample
        return sample

    def samples(self) -> List[Sample]:
        return [self.sample(image_id) for image_id in self.image_ids]
