"""kgforge: knowledge graph embeddings, from triple store to served annotations."""

__version__ = "0.1.0"
