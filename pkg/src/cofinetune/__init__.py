"""Co-finetuning of a shared video-transformer backbone across classification
and spatio-temporal detection datasets, with a sequential-finetuning baseline
and long-tail frame-AP evaluation."""

from .errors import CofinetuneError, ConfigError, DataFormatError, NumericalError

__version__ = "0.1.0"

__all__ = ["CofinetuneError", "ConfigError", "DataFormatError", "NumericalError", "__version__"]
