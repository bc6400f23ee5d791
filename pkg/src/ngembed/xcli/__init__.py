"""Experiment configuration, benchmark pipelines, metrics and file I/O."""
