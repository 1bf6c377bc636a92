"""GABI: geometry-aware Bayesian inversion with graph autoencoder priors."""
