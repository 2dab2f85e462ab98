"""Reasoning-head identification and head-level KV cache compression at toy scale."""

__version__ = "0.1.0"
