"""Backends package for pluggable perceptual and embedding feature extractors."""
