"""Monthly climate emulator: a spherical conditional VAE with latent diffusion, in numpy."""

from .errors import ConfigError, DataError, EmulatorError, NumericError
from .sht import GridSpec

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "EmulatorError", "GridSpec", "NumericError", "__version__"]
