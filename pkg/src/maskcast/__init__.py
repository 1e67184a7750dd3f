"""Masked multi-step probabilistic forecasting."""
