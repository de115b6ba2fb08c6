"""
Shapes-world: a synthetic compositional detection dataset.

Every class is an attribute combination ("red circle", optionally "small red
circle"). Novel classes are held out of the train split but each of their
attributes occurs in some base class, so zero-shot transfer is well posed.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from decola.errors import VocabularyError
from decola.ml.geometry import box_iou
from decola.ml.vocabulary import Vocabulary, tokenize
from decola.schemas import Annotation, DatasetManifest, HiddenGroundTruth, ImageRecord, VocabularySpec
from decola.utils.manifest import hidden_gt_path, save_hidden_gt, save_manifest

logger = logging.getLogger(__name__)

COLORS: Dict[str, Tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 90, 230),
    "yellow": (235, 215, 40),
}
SHAPES = ["circle", "square", "triangle", "diamond"]
# side length range in pixels at 64 px, scaled with the image
SIZES: Dict[str, Tuple[int, int]] = {"small": (8, 13), "large": (16, 24)}
DEFAULT_SIDE = (10, 22)
BACKGROUND = (24, 24, 28)
MAX_OBJECTS = 5


@dataclass
class ShapesWorldSpec:
    colors: List[str] = field(default_factory=lambda: list(COLORS))
    shapes: List[str] = field(default_factory=lambda: list(SHAPES))
    sizes: Optional[List[str]] = None
    # default: the "diagonal" classes (i-th color with i-th shape)
    novel: Optional[List[str]] = None

    def class_names(self) -> List[str]:
        names = [f"{color} {shape}" for color in self.colors for shape in self.shapes]
        if self.sizes:
            names = [f"{size} {name}" for size in self.sizes for name in names]
        return names

    def novel_classes(self) -> List[str]:
        if self.novel is not None:
            return list(self.novel)
        diagonal = [f"{color} {shape}" for color, shape in zip(self.colors, self.shapes)]
        if self.sizes:
            diagonal = [f"{self.sizes[i % len(self.sizes)]} {name}" for i, name in enumerate(diagonal)]
        return diagonal

    def validate(self) -> None:
        unknown = [c for c in self.colors if c not in COLORS] + [s for s in self.shapes if s not in SHAPES]
        unknown += [s for s in (self.sizes or []) if s not in SIZES]
        if unknown:
            raise VocabularyError(f"Unknown attributes in shapes-world spec: {unknown}", token=unknown[0])
        classes = self.class_names()
        novel = self.novel_classes()
        outside = [c for c in novel if c not in classes]
        if outside:
            raise VocabularyError(f"Novel classes not in the attribute grid: {outside}", token=outside[0])
        base_tokens = {t for c in classes if c not in novel for t in tokenize(c)}
        for name in novel:
            unseen = [t for t in tokenize(name) if t not in base_tokens]
            if unseen:
                raise VocabularyError(
                    f"Novel class '{name}' has attribute '{unseen[0]}' that no base class carries",
                    token=unseen[0],
                )

    def vocabulary(self, seed: int, dim: int = 64) -> Vocabulary:
        self.validate()
        novel = set(self.novel_classes())
        classes = self.class_names()
        return Vocabulary(tuple(classes), {c: "novel" if c in novel else "base" for c in classes}, seed, dim)


def _parse(name: str) -> Tuple[Optional[str], str, str]:
    tokens = tokenize(name)
    if len(tokens) == 3:
        return tokens[0], tokens[1], tokens[2]
    return None, tokens[0], tokens[1]


def draw_shape(draw: ImageDraw.ImageDraw, shape: str, color: Tuple[int, int, int], box: Sequence[int]) -> None:
    """Fill `shape` so that it touches every edge of the pixel box (x0, y0, x1, y1), x1/y1 exclusive"""
    x0, y0, x1, y1 = box
    x1, y1 = x1 - 1, y1 - 1
    if shape == "circle":
        draw.ellipse([x0, y0, x1, y1], fill=color)
    elif shape == "square":
        draw.rectangle([x0, y0, x1, y1], fill=color)
    elif shape == "triangle":
        draw.polygon([((x0 + x1) / 2, y0), (x0, y1), (x1, y1)], fill=color)
    elif shape == "diamond":
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        draw.polygon([(cx, y0), (x1, cy), (cx, y1), (x0, cy)], fill=color)
    else:
        raise VocabularyError(f"Unknown shape '{shape}'", token=shape)


def _side_range(size: Optional[str], image_size: int) -> Tuple[int, int]:
    low, high = SIZES[size] if size else DEFAULT_SIDE
    scale = image_size / 64.0
    return max(4, int(round(low * scale))), max(5, int(round(high * scale)))


def render_image(
    rng: np.random.Generator,
    classes: Sequence[str],
    image_size: int,
) -> Tuple[Image.Image, List[Tuple[str, List[float]]]]:
    """Draw 1-5 non-overlapping shapes of the given classes; returns the image and exact boxes"""
    img = Image.new("RGB", (image_size, image_size), BACKGROUND)
    draw = ImageDraw.Draw(img)
    objects: List[Tuple[str, List[float]]] = []
    boxes = np.zeros((0, 4))
    for name in classes:
        size, color, shape = _parse(name)
        low, high = _side_range(size, image_size)
        for _ in range(20):
            side = int(rng.integers(low, high + 1))
            x0 = int(rng.integers(0, image_size - side + 1))
            y0 = int(rng.integers(0, image_size - side + 1))
            box = np.array([x0, y0, x0 + side, y0 + side], dtype=np.float64)
            # one pixel of clearance so shapes never touch
            grown = box + np.array([-1, -1, 1, 1])
            if boxes.shape[0] == 0 or box_iou(grown[None], boxes).max() == 0.0:
                break
        else:
            continue
        draw_shape(draw, shape, COLORS[color], box.astype(int).tolist())
        boxes = np.concatenate([boxes, box[None]], axis=0)
        objects.append((name, box.tolist()))
    return img, objects


def _render_split(
    split: str,
    rng: np.random.Generator,
    num_images: int,
    image_size: int,
    class_pool: Sequence[str],
    out_dir: str,
    vocabulary: Vocabulary,
) -> Tuple[List[ImageRecord], List[Annotation]]:
    os.makedirs(os.path.join(out_dir, "images", split), exist_ok=True)
    records: List[ImageRecord] = []
    annotations: List[Annotation] = []
    for image_id in range(num_images):
        count = int(rng.integers(1, MAX_OBJECTS + 1))
        picks = [class_pool[int(i)] for i in rng.integers(0, len(class_pool), size=count)]
        img, objects = render_image(rng, picks, image_size)
        file_name = f"{split}/{image_id:05d}.png"
        img.save(os.path.join(out_dir, "images", file_name), format="PNG")
        present = {name for name, _ in objects}
        records.append(
            ImageRecord(
                id=image_id,
                file_name=file_name,
                height=image_size,
                width=image_size,
                tags=[c for c in vocabulary.classes if c in present] if split == "weak" else [],
            )
        )
        annotations.extend(Annotation(image_id=image_id, category=name, bbox=box) for name, box in objects)
    return records, annotations


def generate_shapes_dataset(
    seed: int,
    out_dir: str,
    n_train: int = 500,
    n_val: int = 100,
    n_weak: int = 300,
    image_size: int = 64,
    spec: Optional[ShapesWorldSpec] = None,
    dim: int = 64,
) -> Dict[str, DatasetManifest]:
    """
    Writes `vocabulary.json`, `train.json`, `val.json`, `weak.json` and the
    sidecar `weak.hidden-gt.json` under `out_dir`, plus PNG images.
    Train images contain base classes only.
    """
    spec = spec or ShapesWorldSpec()
    vocabulary = spec.vocabulary(seed, dim)
    os.makedirs(out_dir, exist_ok=True)
    vocabulary.save(os.path.join(out_dir, "vocabulary.json"))
    vocab_spec = VocabularySpec(**vocabulary.to_dict())

    pools = {
        "train": vocabulary.base_classes,
        "val": list(vocabulary.classes),
        "weak": list(vocabulary.classes),
    }
    counts = {"train": n_train, "val": n_val, "weak": n_weak}
    manifests: Dict[str, DatasetManifest] = {}
    for index, split in enumerate(["train", "val", "weak"]):
        rng = np.random.default_rng([seed, index])
        records, annotations = _render_split(
            split, rng, counts[split], image_size, pools[split], out_dir, vocabulary
        )
        path = os.path.join(out_dir, f"{split}.json")
        if split == "weak":
            manifest = DatasetManifest(split="weak", vocabulary=vocab_spec, images=records)
            save_hidden_gt(HiddenGroundTruth(manifest=f"{split}.json", annotations=annotations), hidden_gt_path(path))
        else:
            manifest = DatasetManifest(split=split, vocabulary=vocab_spec, images=records, annotations=annotations)
        save_manifest(manifest, path)
        manifests[split] = manifest
        logger.info(f"Generated {split} split: {len(records)} images, {len(annotations)} objects -> {path}")
    return manifests
