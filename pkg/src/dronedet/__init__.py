"""Small-drone detection toolkit covering architecture checks through evaluation."""

__version__ = "0.1.0"
