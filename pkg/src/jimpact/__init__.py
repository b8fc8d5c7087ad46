"""Journal-level AI engagement pipeline: corpus ingestion, annotation,
feature construction, bibliometric joins, and mixed-model estimation."""

__version__ = "0.1.0"
