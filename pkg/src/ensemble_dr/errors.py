"""Exception hierarchy shared across the package.

``exit_code`` is what the CLI returns when the exception escapes:
2 for input/validation problems, 3 for runtime failures.
"""


class EnsembleDRError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2


class DatasetError(EnsembleDRError):
    """Bad labels file, missing image, invalid split request, ..."""


class PreprocessError(EnsembleDRError):
    """Input image does not meet the preprocessing contract."""


class RegistryError(EnsembleDRError):
    """Unknown backbone name or invalid registry request."""


class WeightsUnavailableError(EnsembleDRError):
    """Pretrained weights requested but not present in the local cache."""


class CheckpointError(EnsembleDRError):
    """Corrupt, incompatible or missing checkpoint file."""


class ConfigError(EnsembleDRError):
    """Invalid run configuration (file or flags)."""


class TrainingError(EnsembleDRError):
    """Training aborted at runtime (e.g. non-finite loss)."""

    exit_code = 3
