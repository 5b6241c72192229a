"""Self-supervised Lidar pretraining by contrasting aligned bird's-eye-view cells."""
__version__ = "0.1.0"
