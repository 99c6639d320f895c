"""Synthetic benchmark harness: scenes, training, evaluation, CLI."""
