"""Partially Bayesian convolutional networks."""
