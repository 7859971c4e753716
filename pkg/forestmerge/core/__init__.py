"""Numerical primitives, errors, artifact storage and the gather channel."""
