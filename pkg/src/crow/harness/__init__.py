"""Synthetic data, serialization, frame output, group statistics and the CLI."""
