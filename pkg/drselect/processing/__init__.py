"""Operational layer: configuration, logging, error reporting, command line."""
