"""
Detection endpoints
"""
import dataclasses
import logging
import threading
from typing import List, Literal, Optional

from fastapi import APIRouter, Depends, File, Form, HTTPException, Query, UploadFile
from fastapi.responses import StreamingResponse
from pydantic import BaseModel

from decola.config import settings
from decola.errors import DecolaError
from decola.ml.image_processor import ImageProcessor
from decola.ml.model import DecolaDetector, load_checkpoint
from decola.utils.export_utils import export_detections_csv

logger = logging.getLogger(__name__)

router = APIRouter()

image_processor = ImageProcessor()
_detector: Optional[DecolaDetector] = None
_detector_lock = threading.Lock()


def get_detector() -> DecolaDetector:
    """Load the served checkpoint on first use"""
    global _detector
    with _detector_lock:
        if _detector is None:
            try:
                _detector = load_checkpoint(settings.CHECKPOINT_PATH)
            except DecolaError as e:
                logger.error(f"Error loading checkpoint {settings.CHECKPOINT_PATH}: {e.message}")
                raise HTTPException(status_code=503, detail=f"Model unavailable: {e.message}")
            logger.info(f"Serving phase {_detector.phase} model from {settings.CHECKPOINT_PATH}")
        return _detector


class DetectionResponse(BaseModel):
    class_name: str
    score: float
    box: List[float]  # pixel XYXY in the uploaded image
    query: int

    class Config:
        from_attributes = True


class DetectResponse(BaseModel):
    mode: Literal["conditioned", "open_vocabulary"]
    image_height: int
    image_width: int
    classes: List[str]
    detections: List[DetectionResponse]


class VocabularyResponse(BaseModel):
    classes: List[str]
    base: List[str]
    novel: List[str]
    vocabulary_hash: str
    phase: int


def _parse_classes(classes: Optional[str]) -> Optional[List[str]]:
    if classes is None:
        return None
    names = [name.strip() for name in classes.split(",") if name.strip()]
    return names or None


@router.post("", response_model=DetectResponse)
async def detect_objects(
    file: UploadFile = File(...),
    classes: Optional[str] = Form(None),
    resolution: Optional[int] = Query(None, ge=32, le=1024),
    limit: Optional[int] = Query(None, ge=1, le=1000),
    format: Literal["json", "csv"] = Query("json"),
    detector: DecolaDetector = Depends(get_detector),
):
    """
    Detect objects in an uploaded image. With comma-separated class names the
    detector is conditioned on exactly those classes; without them it runs
    open-vocabulary inference over the model vocabulary.
    """
    names = _parse_classes(classes)
    try:
        image_bytes = await file.read()
        array, original_size = image_processor.preprocess_image(image_bytes=image_bytes, resolution=resolution)
        detections = detector.detect(array, names, limit_k=limit or settings.DETECTION_LIMIT)
    except DecolaError as e:
        raise HTTPException(status_code=400, detail=e.to_dict())
    except Exception as e:
        logger.exception(f"Detection failed for {file.filename}")
        raise HTTPException(status_code=500, detail=f"Error running detection: {str(e)}")

    detections = dataclasses.replace(detections, image_size=original_size)
    if format == "csv":
        return StreamingResponse(
            iter([export_detections_csv(detections)]),
            media_type="text/csv",
            headers={"Content-Disposition": "attachment; filename=detections.csv"},
        )

    height, width = original_size
    scale = [width, height, width, height]
    return DetectResponse(
        mode="conditioned" if names else "open_vocabulary",
        image_height=height,
        image_width=width,
        classes=names or list(detector.vocabulary.classes),
        detections=[
            DetectionResponse(
                class_name=record["class"],
                score=record["score"],
                box=[c * s for c, s in zip(record["box"], scale)],
                query=record["query"],
            )
            for record in detections.to_records()
        ],
    )


@router.get("/vocabulary", response_model=VocabularyResponse)
async def get_vocabulary(detector: DecolaDetector = Depends(get_detector)):
    """Class names the served model can be conditioned on"""
    vocabulary = detector.vocabulary
    return VocabularyResponse(
        classes=list(vocabulary.classes),
        base=list(vocabulary.base_classes),
        novel=list(vocabulary.novel_classes),
        vocabulary_hash=vocabulary.content_hash(),
        phase=detector.phase,
    )
