"""Dense retriever selection for unlabeled target corpora."""

__version__ = "0.1.0"
