"""
Exception hierarchy for the detection pipeline
"""
from typing import Any, Dict, Optional


class DecolaError(ValueError):
    """Base error; `details` is copied verbatim into the CLI error JSON"""

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": type(self).__name__,
            "message": self.message,
            "details": self.details,
        }


class BoxFormatError(DecolaError):
    def __init__(self, message: str, box_index: Optional[int] = None, **details: Any):
        super().__init__(message, box_index=box_index, **details)
        self.box_index = box_index


class VocabularyError(DecolaError):
    def __init__(self, message: str, token: Optional[str] = None, **details: Any):
        super().__init__(message, token=token, **details)
        self.token = token


class SelectionError(DecolaError):
    pass


class BlockLayoutError(DecolaError):
    pass


class MatchingError(DecolaError):
    pass


class ManifestError(DecolaError):
    def __init__(self, message: str, field_path: Optional[str] = None, **details: Any):
        super().__init__(message, field_path=field_path, **details)
        self.field_path = field_path


class CheckpointError(DecolaError):
    pass


class TrainingDivergedError(DecolaError):
    def __init__(self, message: str, last_good_checkpoint: Optional[str] = None, **details: Any):
        super().__init__(message, last_good_checkpoint=last_good_checkpoint, **details)
        self.last_good_checkpoint = last_good_checkpoint


class ImageError(DecolaError):
    pass
