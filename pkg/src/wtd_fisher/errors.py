"""Exception hierarchy.

Configuration/validation problems derive from :class:`ModelError` (CLI exit 2);
numerical and physical failures derive from :class:`ComputationError` (CLI exit 3).
"""


class WtdFisherError(Exception):
    pass


class ModelError(WtdFisherError, ValueError):
    """Invalid model, configuration or argument.

    ``path`` locates the offending field in a config document, if known.
    """

    def __init__(self, message, path=None):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)


class GridMismatchError(ModelError):
    pass


class ComputationError(WtdFisherError):
    pass


class ErgodicityError(ComputationError):
    """Steady state is not unique, or it is dark (no detected emission)."""


class TailError(ComputationError):
    """Survival probability beyond ``tau_max`` exceeds the allowed tail."""


class NonFiniteDerivative(ComputationError):
    pass


class DegenerateInformation(ComputationError):
    """Fisher information is zero, negative or not finite."""


class StepSizeError(ComputationError):
    pass
