"""Joint generative-discriminative zone localization on synthetic phantoms."""

__version__ = "0.1.0"
