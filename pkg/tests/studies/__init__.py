"""Seeded directional study package."""
