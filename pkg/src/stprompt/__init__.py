"""Forecasting with frozen graph backbones and residual temporal prompts."""
