"""Transferable-memory spatiotemporal predictive learning."""
