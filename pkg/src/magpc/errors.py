"""Exception hierarchy. Each class maps onto a CLI exit code."""


class MagpcError(Exception):
    exit_code = 1


class ConfigError(MagpcError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    """Shape mismatch. `agent` names the offending agent when known."""

    def __init__(self, message, agent=None):
        if agent is not None:
            message = f"agent {agent}: {message}"
        super().__init__(message)
        self.agent = agent


class ProtocolError(MagpcError, RuntimeError):
    exit_code = 2


class NumericError(MagpcError, ArithmeticError):
    exit_code = 3


class DivergenceError(NumericError):
    def __init__(self, message, round_index=None):
        super().__init__(message)
        self.round_index = round_index


class NotStabilizingError(NumericError):
    def __init__(self, message, spectral_radius=None):
        super().__init__(message)
        self.spectral_radius = spectral_radius


class DefectiveMatrixError(NumericError):
    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class SynthesisError(NumericError):
    pass


class AcceptanceError(MagpcError):
    exit_code = 4
