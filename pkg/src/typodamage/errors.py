"""Exception types shared across the toolkit."""


class InvalidInputError(ValueError):
    """Raised when data handed to an operation violates its preconditions."""


class ConfigurationError(ValueError):
    """Raised when a config or checkpoint is inconsistent with the request."""


class GenerationError(RuntimeError):
    """Raised when the synthetic scene generator cannot satisfy a spec."""


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch, batch_index, parts):
        self.epoch = epoch
        self.batch_index = batch_index
        self.parts = parts
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index}: {parts}"
        )
