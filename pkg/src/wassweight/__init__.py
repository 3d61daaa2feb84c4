"""Subject-weighted training of autoencoder classifiers via Wasserstein distances."""

__version__ = "0.1.0"
