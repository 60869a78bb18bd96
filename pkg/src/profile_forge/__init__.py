"""Character profiling from book-length text with LLM summarizers and judges."""

__version__ = "0.1.0"
