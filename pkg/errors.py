class BinderError(Exception):
    """
    Base class for every error raised by the library
    """


class ConfigError(BinderError, ValueError):
    """
    Invalid or inconsistent configuration
    """


class DegenerateAttentionError(BinderError, RuntimeError):
    """
    An attention row summed to exactly zero before renormalization
    """


class TokenRangeError(BinderError, ValueError):
    """
    A token id outside [0, vocab_size)
    """


class GenerationError(BinderError, RuntimeError):
    """
    Scene placement could not be satisfied
    """

    def __init__(self, message, scene_index=None):
        super().__init__(message)
        self.scene_index = scene_index


class IngestionError(BinderError, IOError):
    """
    Missing or corrupt dataset file
    """

    def __init__(self, message, path=None):
        super().__init__(f"{message}: {path}" if path else message)
        self.path = str(path) if path else None


class NonFiniteLossError(BinderError, FloatingPointError):
    """
    Training produced a NaN or infinite loss
    """

    def __init__(self, step, metrics):
        super().__init__(f"Non-finite loss at step {step}: {metrics}")
        self.step = step
        self.metrics = metrics


class AnalysisError(BinderError, ValueError):
    """
    Invalid request to an analysis command
    """
