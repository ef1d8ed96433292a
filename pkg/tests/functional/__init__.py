"""Per-module functional tests."""
