"""refilter: recall-expand-filter entity typing with a multi-candidate
cross-encoder, runnable and verifiable at desk scale."""

__version__ = "0.1.0"
