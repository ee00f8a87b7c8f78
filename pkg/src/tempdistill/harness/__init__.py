"""Toy teacher/student distillation harness."""
