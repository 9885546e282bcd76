class ConfigurationError(ValueError):
    """Invalid configuration values (bad ranges, empty category sets, ...)."""


class ShapeError(ValueError):
    """Array or tensor dimensions that do not agree."""


class InputError(ValueError):
    """Malformed inputs: unknown tokens, mismatched category sets, empty supervision."""


class LayoutError(ValueError):
    """Invalid prompt layout, e.g. more front prompts than total prompts."""


class TrainingDivergenceError(RuntimeError):
    """A non-finite loss was produced during optimisation."""

    def __init__(self, stage, batch_id, loss):
        self.stage = stage
        self.batch_id = batch_id
        self.loss = loss
        super().__init__(f"{stage}: non-finite loss {loss!r} at batch {batch_id}")
