"""Face anonymization, de-anonymization attacks, and reversibility scoring."""

__version__ = "0.1.0"
