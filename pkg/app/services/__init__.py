"""Numerical core: forward models, networks, samplers and baselines."""
