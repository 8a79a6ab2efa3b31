"""Caption-guided learned image compression."""

from .codec import Codec, CompressResult
from .entropy import RateReport
from .errors import (ConfigurationError, DecodingError, EncodingError, FormatError, InputError,
                     NumericError, TGICError, TrainingError, VersionError)
from .model import TGICModel
from .nets import ArchConfig
from .semantic import SemanticSpace, TextEmbedding

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "Codec", "CompressResult", "ConfigurationError", "DecodingError",
    "EncodingError", "FormatError", "InputError", "NumericError", "RateReport",
    "SemanticSpace", "TGICError", "TGICModel", "TextEmbedding", "TrainingError",
    "VersionError",
]
