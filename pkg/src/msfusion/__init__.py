"""Multi-stage intermediate fusion of CT and PET volumes for binary classification."""

__version__ = "0.1.0"
