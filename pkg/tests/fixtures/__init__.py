"""Prompt banks and golden prompts used by the tests."""
