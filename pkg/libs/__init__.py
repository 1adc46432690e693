"""Libs package for utility functions and shared components."""
