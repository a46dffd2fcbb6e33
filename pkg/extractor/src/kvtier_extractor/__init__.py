"""Record attention traces from decoder-only transformers as .kvtr files.

The containers this package writes are consumed by the ``kvtier`` engine;
the two projects share only the byte format and the ``kvtier`` command line,
never code.
"""

from .extract import extract
from .kvtr import write_kvtr
from .spec import ContextOverflowError, ExtractionSpec, ExtractorError, ModelLoadError

__all__ = [
    "ContextOverflowError",
    "ExtractionSpec",
    "ExtractorError",
    "ModelLoadError",
    "extract",
    "write_kvtr",
    "__version__",
]

__version__ = "0.1.0"
