"""Few-step edit-friendly DDPM inversion on closed-form denoisers."""

__version__ = "0.1.0"
