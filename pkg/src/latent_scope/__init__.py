"""Virtual beam diagnostics: simulated phase-space data, a convolutional
encoder-decoder surrogate, and extremum-seeking tuning of its latent space."""

from . import beamsim, config, esopt, io, latentune, phasenet, pipeline

__version__ = "0.1.0"

__all__ = ["beamsim", "config", "esopt", "io", "latentune", "phasenet", "pipeline", "__version__"]
