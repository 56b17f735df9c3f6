"""Convolutional orientation estimator trained with the atan2 loss."""
