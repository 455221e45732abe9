"""Exception hierarchy shared by every module.

Each error carries an ``exit_code`` used by the command-line front end:
0 ok, 2 config, 3 data/shape, 4 divergence, 1 anything else.
"""


class CvgeoError(Exception):
    exit_code = 1


class ConfigError(CvgeoError):
    exit_code = 2


class ShapeError(CvgeoError, ValueError):
    exit_code = 3


class NormalizationError(CvgeoError, ValueError):
    exit_code = 3


class EmbeddingDegenerate(NormalizationError):
    """Raised when a stream's pre-normalization vector is exactly zero."""


class FormatError(CvgeoError):
    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ManifestError(CvgeoError):
    exit_code = 3


class TraceError(CvgeoError):
    exit_code = 3


class EmptyBatchError(CvgeoError, ValueError):
    exit_code = 3


class BatchTooSmallError(CvgeoError, ValueError):
    exit_code = 3


class PoolEmptyError(CvgeoError):
    exit_code = 3


class DegenerateMapError(CvgeoError):
    exit_code = 3


class SupervisionError(CvgeoError):
    exit_code = 3


class DivergenceError(CvgeoError):
    exit_code = 4

    def __init__(self, message, step):
        super().__init__(f"{message} at step {step}")
        self.step = step
