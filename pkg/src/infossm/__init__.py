"""Multi-modal Gaussian-process state-space models with mutual-information regularization."""
__version__ = "0.1.0"
