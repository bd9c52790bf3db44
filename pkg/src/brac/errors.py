"""Shared exception types."""


class ConfigError(ValueError):
    """Bad static configuration: mismatched shapes, invalid hyperparameters."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class TrainingError(RuntimeError):
    """Non-finite values appeared during training.

    Carries the name of the computation site and the training step index so
    the harness can record the failure instead of crashing.
    """

    def __init__(self, site, step=None):
        self.site = site
        self.step = step
        msg = f"non-finite values in '{site}'"
        if step is not None:
            msg += f" at step {step}"
        super().__init__(msg)


class FormatError(ValueError):
    """A serialized artifact is corrupt or has the wrong layout."""
