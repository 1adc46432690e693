"""Test suite for the asset generation pipeline."""
