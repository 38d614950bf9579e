"""Query-adaptive tri-modal fusion, event decoding, grounding metrics, and
corpus tooling at desk scale."""

__version__ = "0.1.0"
