"""Language-guided relation transfer for few-shot class-incremental learning."""

__version__ = "0.1.0"
