"""Exception hierarchy shared by every module.

Each class carries an ``exit_code`` so the command line front end can map
failures to distinct process exit statuses.
"""


class QafError(Exception):
    exit_code = 1


class ContractError(QafError, ValueError):
    """A precondition on an argument was violated (empty batch, n <= 0, ...)."""

    exit_code = 2


class ShapeError(ContractError):
    pass


class DomainError(ContractError):
    pass


class ConfigError(ContractError):
    pass


class DataError(QafError):
    exit_code = 3


class ScenarioError(DataError, ValueError):
    pass


class SegmentationError(DataError, ValueError):
    pass


class TrainingError(QafError, RuntimeError):
    exit_code = 4

    def __init__(self, message, leaf_id=None, round_index=None):
        super().__init__(message)
        self.leaf_id = leaf_id
        self.round_index = round_index


class FederationError(TrainingError):
    pass


class CalibrationError(QafError, ValueError):
    exit_code = 5

    def __init__(self, message, min_n=None):
        super().__init__(message)
        self.min_n = min_n


class ArtifactError(QafError):
    """Missing, unreadable or hash-mismatched artifact file."""

    exit_code = 6


class DegenerateRangeError(ContractError):
    pass
