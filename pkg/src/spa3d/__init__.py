"""3D point-trajectory autoencoder for scoring motion realism."""

__version__ = "0.1.0"
