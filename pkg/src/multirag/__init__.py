"""Trust-aware multi-source knowledge fusion and line-graph retrieval engine."""

from .errors import MultiRagError

__version__ = "0.1.0"
__all__ = ["MultiRagError", "__version__"]
