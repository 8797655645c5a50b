"""Exception hierarchy shared by every catnet module."""


class CatNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CatNetError, ValueError):
    pass


class ContractError(CatNetError, ValueError):
    pass


class ConfigError(CatNetError, ValueError):
    pass


class DatasetError(CatNetError):
    pass


class TrainingError(CatNetError, RuntimeError):
    pass


class CheckpointError(CatNetError):
    pass


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint bytes are corrupted or truncated."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class WavError(CatNetError, ValueError):
    pass


class UndefinedReferenceError(CatNetError, ValueError):
    """SDR requested against a reference that carries no energy."""


class InputError(CatNetError, ValueError):
    pass
