"""Exceptions raised across alip-stepper and the exit codes the CLI maps them to."""


class AlipStepperError(Exception):
    """Base class for every error this package raises on purpose."""

    exit_code = 1


class ConfigError(AlipStepperError):
    """Malformed config file, unknown key or unparsable value."""

    exit_code = 2


class InvalidParams(AlipStepperError, ValueError):
    """A typed parameter record violates its invariants."""

    exit_code = 2


class DimensionMismatch(AlipStepperError, ValueError):
    exit_code = 2


class NoOrbit(AlipStepperError):
    """The two-step closure system has no unique solution."""

    exit_code = 3


class SolverFailure(AlipStepperError):
    """The footstep QP could not be solved to tolerance."""

    exit_code = 3

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class StaleEnv(AlipStepperError):
    """env_step called after the episode terminated."""


class OverlappingPush(AlipStepperError):
    pass


class NoForwardRecorded(AlipStepperError):
    pass


class CorruptCheckpoint(AlipStepperError):
    exit_code = 2


class VersionMismatch(CorruptCheckpoint):
    pass


class NonFiniteLoss(AlipStepperError):
    """A PPO loss or gradient went NaN/inf."""

    exit_code = 4
