"""Training package for the two optimization stages."""
