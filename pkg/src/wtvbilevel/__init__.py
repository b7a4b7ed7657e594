"""Unsupervised bilevel estimation of weighted TV regularisation maps."""
