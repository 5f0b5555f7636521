"""Feature exporter: frozen-backbone embeddings written as emofuse files."""

__version__ = "0.1.0"


class ExportError(Exception):
    """A clip could not be exported (decode failure, missing audio, ...)."""
