"""Numpy autodiff, TT-Net model and training loop."""
