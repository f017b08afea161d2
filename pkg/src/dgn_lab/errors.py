from __future__ import annotations

from pathlib import Path


class DgnError(Exception):
    """Base class for every error raised by dgn_lab."""


class ShapeMismatchError(DgnError, ValueError):
    """Array shapes disagree with the layer or network they are fed to."""


class NonFiniteError(DgnError):
    """A NaN or infinity appeared in the forward dynamics."""

    def __init__(self, layer: int, timestep: int, quantity: str = "V"):
        self.layer = layer
        self.timestep = timestep
        self.quantity = quantity
        super().__init__(
            f"Non-finite {quantity} in layer {layer} at timestep {timestep}"
        )


class StepSizeError(DgnError, ValueError):
    """An integration step is too coarse for the requested accuracy."""


class InstabilityError(DgnError):
    """The effective conductance G0 is not positive; no steady state exists."""


class DivergenceError(DgnError):
    """A stochastic trajectory left the finite range during integration."""

    def __init__(self, step: int, trial: int, value: float):
        self.step = step
        self.trial = trial
        self.value = value
        super().__init__(
            f"SDE trajectory diverged at step {step} (trial {trial}, V={value!r})"
        )


class CacheError(DgnError):
    """A forward cache is missing records the backward pass needs."""


class TrainingDivergedError(DgnError):
    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(
            f"Non-finite loss {loss!r} at epoch {epoch}, batch {batch}"
        )


class TrainingCancelledError(DgnError):
    """Raised when a training run is cancelled."""


class DatasetFormatError(DgnError):
    """A sample or manifest file failed to parse or validate."""

    def __init__(self, path: Path | str, line: int | None, message: str):
        self.path = Path(path)
        self.line = line
        location = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{location}: {message}")


class CheckpointError(DgnError):
    """Checkpoint version mismatch or corrupted payload."""


class ConfigError(DgnError):
    """Experiment configuration failed schema validation."""


class GradientCheckError(DgnError):
    """A gradient oracle disagreed beyond tolerance or produced a non-finite loss."""
