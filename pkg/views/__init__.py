"""Views package for command-line subcommand handlers."""
