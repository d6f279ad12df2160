"""Synthetic data and benchmark protocols."""
