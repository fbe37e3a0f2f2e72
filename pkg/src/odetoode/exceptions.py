"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ManifoldError(ValueError):
    """A matrix violates the structural constraint of its declared type."""


class ManifoldDriftError(ManifoldError):
    """An update left the manifold by more than the drift tolerance."""


class IntegrationError(FloatingPointError):
    """A forward integration produced a non-finite value."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class EstimatorError(FloatingPointError):
    """An objective evaluation inside an estimator was not finite."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DatasetError(ValueError):
    """A dataset could not be parsed or is structurally invalid."""


class ConfigError(ValueError):
    """An experiment configuration is invalid."""

    def __init__(self, message, key=None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key
