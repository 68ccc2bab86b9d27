"""Distributed MPC under falsified dual prices, with an EM supervision layer."""
