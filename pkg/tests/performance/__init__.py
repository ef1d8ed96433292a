"""Benchmarks of the planner hot paths."""
