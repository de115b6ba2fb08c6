"""
Image loading and resizing for model input
"""
import io
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from decola.errors import ImageError


class ImageProcessor:
    """Load RGB images and rescale them so the shorter side equals `resolution`"""

    def __init__(self, resolution: Optional[int] = None):
        self.resolution = resolution

    def load_image(self, image_path: str) -> Image.Image:
        try:
            with Image.open(image_path) as img:
                return img.convert("RGB")
        except Exception as e:
            raise ImageError(f"Error loading image: {str(e)}", path=image_path)

    def load_image_from_bytes(self, image_bytes: bytes) -> Image.Image:
        """Load an image from bytes (e.g., uploaded file)"""
        try:
            with Image.open(io.BytesIO(image_bytes)) as img:
                return img.convert("RGB")
        except Exception as e:
            raise ImageError(f"Error loading image from bytes: {str(e)}")

    def resize(self, img: Image.Image, resolution: Optional[int] = None) -> Image.Image:
        resolution = resolution or self.resolution
        if not resolution:
            return img
        width, height = img.size
        scale = resolution / min(width, height)
        size = (max(1, round(width * scale)), max(1, round(height * scale)))
        if size == img.size:
            return img
        return img.resize(size, Image.BILINEAR)

    def to_array(self, img: Image.Image) -> np.ndarray:
        """H x W x 3 float32 array in [0, 1]"""
        return np.asarray(img, dtype=np.float32) / 255.0

    def preprocess_image(
        self,
        image_path: Optional[str] = None,
        image_bytes: Optional[bytes] = None,
        resolution: Optional[int] = None,
    ) -> Tuple[np.ndarray, Tuple[int, int]]:
        """Returns the model-ready array and the original (height, width)"""
        if image_path:
            img = self.load_image(image_path)
        elif image_bytes:
            img = self.load_image_from_bytes(image_bytes)
        else:
            raise ImageError("Either image_path or image_bytes must be provided")
        original_size = (img.size[1], img.size[0])
        return self.to_array(self.resize(img, resolution)), original_size
