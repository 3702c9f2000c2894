"""Partial BNN tests."""
