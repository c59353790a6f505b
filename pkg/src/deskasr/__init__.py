"""Desk-scale non-autoregressive speech recognition pipeline."""
