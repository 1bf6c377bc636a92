"""HTTP routers for the inference service."""
