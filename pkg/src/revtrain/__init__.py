"""revtrain: memory-frugal CNN training via invertible layers and reversible blocks."""

__version__ = "0.1.0"
