"""Exception hierarchy shared by all pipeline stages."""


class HandPoseError(ValueError):
    """Base class for every error raised by this package."""


class EmptyCloudError(HandPoseError):
    def __init__(self, what="cloud"):
        super().__init__(f"empty {what}")


class DegenerateError(HandPoseError):
    """A geometric computation has no unique solution (collinear sample, rank-deficient covariance, ...)."""


class NoPlaneFoundError(HandPoseError):
    pass


class ParseError(HandPoseError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class ConfigError(HandPoseError):
    pass


class JointLimitError(HandPoseError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("joint limits violated: " + "; ".join(str(v) for v in self.violations))
