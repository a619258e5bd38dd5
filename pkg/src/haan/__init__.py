"""Unsupervised single-image defogging with hybrid attention."""
