"""Unit tests for the Self-Translate-Train toolkit."""
