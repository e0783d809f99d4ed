"""Rail and crosstie segmentation of railroad point clouds with synthetic training data."""

__version__ = "0.1.0"
