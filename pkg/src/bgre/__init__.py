"""Bayesian grouped random effects for dynamic panel forecasting."""
