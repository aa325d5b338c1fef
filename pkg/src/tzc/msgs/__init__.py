"""Bundled .msg corpus.

One schema per file, filename = type name, flat directory (subdirectories
are also scanned).  ``load_corpus`` parses the whole set in dependency
order.
"""

import functools
from pathlib import Path

from ..schema import SchemaRegistry


def corpus_dir() -> Path:
    return Path(__file__).resolve().parent


def load_corpus(registry: SchemaRegistry | None = None) -> SchemaRegistry:
    registry = registry if registry is not None else SchemaRegistry()
    registry.load_directory(corpus_dir())
    return registry


@functools.lru_cache(maxsize=1)
def default_registry() -> SchemaRegistry:
    """Shared read-only registry of the bundled corpus."""
    return load_corpus()
