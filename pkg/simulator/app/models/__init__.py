"""Shared value types (constants, coherence curves)."""
