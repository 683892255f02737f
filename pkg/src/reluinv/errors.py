"""Exception hierarchy shared by the simulator, the attack and the CLI."""


class ReluInvError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ReluInvError, ValueError):
    pass


class ConfigError(ReluInvError, ValueError):
    pass


class IngestionError(ReluInvError, IOError):
    pass


class CaptureFormatError(ReluInvError, ValueError):
    pass


class UnsupportedVersionError(CaptureFormatError):
    pass


class RankError(ReluInvError, ValueError):
    pass


class AttackPreconditionError(ReluInvError, ValueError):
    pass


class NoGroundTruthError(ReluInvError, ValueError):
    pass
