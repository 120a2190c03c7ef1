"""Category-aware sequential recommendation with coupled and tripled seq2seq translation."""

__version__ = "0.1.0"
