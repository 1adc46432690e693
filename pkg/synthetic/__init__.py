"""Synthetic package for the procedural object renderer and dataset generator."""
