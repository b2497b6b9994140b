class ImbenchError(Exception):
    """Base class for pipeline errors"""


class ConfigError(ImbenchError):
    """Run configuration is invalid"""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = {'config': [errors]}
        self.errors = errors
        lines = [f"{field}: {'; '.join(str(m) for m in messages)}" for field, messages in errors.items()]
        super().__init__('\n'.join(lines))


class CubeFormatError(ImbenchError):
    """Cube or mask file is malformed"""


class CovarianceError(ImbenchError):
    """Frequency covariance cannot be factorized"""


class RestorerContractError(ImbenchError):
    """A restorer altered observed cells or produced non-finite values"""

    def __init__(self, message, max_deviation=None):
        self.max_deviation = max_deviation
        super().__init__(message)


class StageError(ImbenchError):
    """A pipeline stage failed"""

    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"{stage}: {message}")
