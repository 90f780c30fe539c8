"""Laplace-approximated posterior covariances for ODE parameter inference."""
