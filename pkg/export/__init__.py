"""Export package for mesh extraction, asset files and galleries."""
