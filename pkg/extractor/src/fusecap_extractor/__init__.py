"""Pretrained-encoder embedding extraction for the retrieval engine.

Exports embeddings in the engine's binary file format; the engine side
is reached only through that format (and its `validate` CLI), never as a
library import.
"""

__version__ = "0.1.0"
