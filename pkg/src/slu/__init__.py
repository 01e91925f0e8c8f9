"""Spoken language understanding toolkit: synthetic corpus, transducer and attention models, entity alignment."""

__version__ = "0.1.0"
