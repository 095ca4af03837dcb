"""wmunlearn - embed, recover and unlearn black-box watermarks in small neural classifiers."""

__version__ = "1.0.0"
