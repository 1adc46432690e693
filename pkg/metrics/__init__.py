"""Metrics package for image and geometry evaluation."""
