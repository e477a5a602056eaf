class TTComputeError(Exception):
    """Base class for every error raised by ttcompute."""


class ConfigError(TTComputeError):
    """Campaign config does not parse or does not validate."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class BackendError(TTComputeError):
    pass


class BackendUnreachableError(BackendError):
    pass


class UnknownTaskError(BackendError):
    def __init__(self, task_id: int):
        self.task_id = task_id
        super().__init__(f"Task {task_id} is not known to the evaluator.")


class UnknownCheckpointError(BackendError):
    def __init__(self, checkpoint_id: str):
        self.checkpoint_id = checkpoint_id
        super().__init__(f"Checkpoint {checkpoint_id!r} is not known to the backend.")


class EmptyRolloutsError(TTComputeError):
    pass


class InputError(TTComputeError):
    pass


class EmptyInputError(InputError):
    pass


class LengthMismatchError(InputError):
    pass


class DegenerateInputError(InputError):
    pass


class TooFewSamplesError(InputError):
    pass


class ParameterOutOfRangeError(InputError):
    pass


class InsufficientSamplesError(InputError):
    pass


class MissingFeedbackError(InputError):
    pass


class OverlapDetectedError(InputError):
    pass


class AnalysisError(TTComputeError):
    pass


class UnknownAnalysisError(AnalysisError):
    pass


# What reading a missing or mistyped field of a decoded response body raises;
# pydantic's ValidationError is a ValueError.
MALFORMED_BODY = (AttributeError, KeyError, IndexError, TypeError, ValueError)
