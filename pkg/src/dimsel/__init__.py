"""Query-aware dimension selection for dense retrieval embeddings."""

__version__ = "0.1.0"
