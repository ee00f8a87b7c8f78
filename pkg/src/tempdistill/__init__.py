"""Temporal-relation distillation toolkit."""
