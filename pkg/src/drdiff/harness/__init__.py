"""Configuration, corpus ingestion and experiment runners behind the ``drdiff`` CLI."""

from .config import ConfigError, RunConfig, load_config
from .corpus import Corpus, ingest

__all__ = ["ConfigError", "RunConfig", "load_config", "Corpus", "ingest"]
