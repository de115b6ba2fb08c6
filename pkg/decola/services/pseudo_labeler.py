"""
Offline pseudo-labeling of tag-only images with a Phase 1 (conditioned) detector
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from decola.config import settings
from decola.errors import DecolaError, ManifestError
from decola.ml.decoder import DecoderMode
from decola.ml.geometry import cxcywh_to_xyxy
from decola.ml.image_processor import ImageProcessor
from decola.schemas import Annotation, DatasetManifest, ImageRecord, PseudoLabelFailure, PseudoLabelReport
from decola.utils.diagnostics import diagnostics
from decola.utils.manifest import image_path, load_manifest, save_manifest

logger = logging.getLogger(__name__)


def _canonical(annotations: List[Annotation]) -> List[Annotation]:
    return sorted(annotations, key=lambda a: (a.image_id, a.category, a.resolution_h or 0, -(a.score or 0.0), a.bbox))


class PseudoLabeler:
    """Turns image tags into boxes: for every tag, the most confident conditioned detection"""

    def __init__(self, model, labeler: str, topj: int = 1, min_score: float = 0.0, processor: Optional[ImageProcessor] = None):
        if model.config.second_stage != "single":
            raise DecolaError("Pseudo-labeling needs a model with the single conditioned score head")
        self.model = model
        self.labeler = labeler
        self.topj = topj
        self.min_score = min_score
        self.processor = processor or ImageProcessor()

    def pseudo_label_image(self, rec: ImageRecord, img: Image.Image, h: int) -> List[Annotation]:
        """One resolution of one weak image; `img` is the original-size image"""
        known = set(self.model.vocabulary.classes)
        tags = []
        for tag in rec.tags:
            if tag in known:
                tags.append(tag)
            else:
                diagnostics.increment("unknown_tag", image_id=rec.id, tag=tag)
        tags = list(dict.fromkeys(tags))
        if not tags:
            return []

        array = self.processor.to_array(self.processor.resize(img, h))
        forward = self.model.forward(array, tags)
        output = forward.output
        if output.mode != DecoderMode.CONDITIONED_BINARY:
            raise DecolaError(f"Pseudo-labeling expects conditioned binary outputs (got {output.mode.value})")

        n = forward.queries.n
        scores = 1.0 / (1.0 + np.exp(-output.final.logits.numpy()[:, 0].astype(np.float64)))
        boxes = cxcywh_to_xyxy(output.final.boxes.numpy().astype(np.float64))
        scale = np.array([rec.width, rec.height, rec.width, rec.height], dtype=np.float64)

        annotations: List[Annotation] = []
        for block, tag in enumerate(forward.queries.class_names):
            rows = np.arange(block * n, (block + 1) * n)
            order = rows[np.argsort(-scores[rows], kind="stable")][: self.topj]
            for index in order:
                score = float(scores[index])
                if score <= self.min_score or score <= 0.0:
                    diagnostics.increment("below_min_score", image_id=rec.id, tag=tag, score=f"{score:.4f}")
                    continue
                box = np.clip(boxes[index] * scale, 0.0, scale)
                if not (box[2] > box[0] and box[3] > box[1]):
                    diagnostics.increment("degenerate_pseudo_box", image_id=rec.id, tag=tag)
                    continue
                annotations.append(
                    Annotation(
                        image_id=rec.id,
                        category=tag,
                        bbox=[float(c) for c in box],
                        score=score,
                        resolution_h=h,
                        labeler=self.labeler,
                    )
                )
        return annotations

    def label_record(self, path: str, rec: ImageRecord, resolutions: Sequence[int]) -> Tuple[Dict[int, List[Annotation]], Optional[str]]:
        try:
            img = self.processor.load_image(path)
        except DecolaError as e:
            diagnostics.increment("unreadable_image", image_id=rec.id, path=path)
            return {}, e.message
        per_res = {h: self.pseudo_label_image(rec, img, h) for h in resolutions}
        return per_res, None


def merge_multiresolution(
    per_res: Dict[int, List[Annotation]],
    expected: Optional[Dict[int, Sequence[int]]] = None,
) -> List[Annotation]:
    """
    Union of every resolution's annotations, canonically sorted by
    (image id, class, resolution). `expected` maps each resolution to the image
    ids it should have labeled; gaps are reported, not filled.
    """
    if expected:
        all_ids = sorted({i for ids in expected.values() for i in ids})
        for h, ids in sorted(expected.items()):
            missing = sorted(set(all_ids) - set(ids))
            if missing:
                diagnostics.increment("missing_resolution", len(missing), resolution=h, image_ids=missing[:10])
    merged = [ann for h in sorted(per_res) for ann in per_res[h]]
    return _canonical(merged)


def expand_dataset(
    model,
    weak_path: str,
    resolutions: Sequence[int],
    out_path: str,
    labeler: str,
    topj: int = 1,
    min_score: float = 0.0,
) -> DatasetManifest:
    """
    Pseudo-label every weak image at every resolution and write a pseudo
    manifest plus `<out>.report.json`; failed images are left out and listed
    in the report.
    """
    if not resolutions:
        raise ManifestError("At least one resolution is required", field_path="resolutions")
    weak = load_manifest(weak_path)
    if weak.split != "weak":
        raise ManifestError(f"{weak_path} is a '{weak.split}' manifest, not a weak one", field_path="split")
    if weak.vocabulary.classes != list(model.vocabulary.classes):
        raise ManifestError("Weak manifest vocabulary differs from the labeler's", field_path="vocabulary")

    pseudo_labeler = PseudoLabeler(model, labeler, topj, min_score)
    resolutions = sorted(set(int(h) for h in resolutions))
    unknown_before = diagnostics.get("unknown_tag")

    def run(rec: ImageRecord):
        return pseudo_labeler.label_record(image_path(weak_path, weak, rec), rec, resolutions)

    with ThreadPoolExecutor(max_workers=max(1, settings.DECOLA_THREADS)) as pool:
        results = list(pool.map(run, weak.images))

    per_res: Dict[int, List[Annotation]] = {h: [] for h in resolutions}
    expected: Dict[int, List[int]] = {h: [] for h in resolutions}
    labeled: List[ImageRecord] = []
    failures: List[PseudoLabelFailure] = []
    for rec, (record_res, error) in zip(weak.images, results):
        if error is not None:
            failures.append(PseudoLabelFailure(image_id=rec.id, file_name=rec.file_name, reason=error))
            continue
        labeled.append(rec)
        for h, annotations in record_res.items():
            per_res[h].extend(annotations)
            expected[h].append(rec.id)

    weak_root = weak.image_root if os.path.isabs(weak.image_root) else os.path.join(os.path.dirname(weak_path), weak.image_root)
    out_dir = os.path.dirname(os.path.abspath(out_path))
    manifest = DatasetManifest(
        split="train",
        source="pseudo",
        vocabulary=weak.vocabulary,
        image_root=os.path.relpath(os.path.abspath(weak_root), out_dir),
        images=labeled,
        annotations=merge_multiresolution(per_res, expected),
    )
    save_manifest(manifest, out_path)

    report = PseudoLabelReport(
        labeler=labeler,
        resolutions=resolutions,
        images_total=len(weak.images),
        images_labeled=len(labeled),
        annotations=len(manifest.annotations),
        skipped_tags=diagnostics.get("unknown_tag") - unknown_before,
        failures=failures,
    )
    root, _ = os.path.splitext(out_path)
    with open(root + ".report.json", "w") as f:
        f.write(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    logger.info(
        f"Pseudo-labeled {len(labeled)}/{len(weak.images)} images at {resolutions}: "
        f"{len(manifest.annotations)} boxes -> {out_path}"
    )
    return manifest
