"""Exception types shared across the toolkit."""

from __future__ import annotations


class AfnetError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(AfnetError):
    """Invalid parameters, preconditions, or configuration files."""


class DataError(AfnetError):
    """Malformed payloads, headers, or label rasters."""


class NonFiniteDataError(DataError):
    """A loaded array contains NaN or Inf values."""

    def __init__(self, count: int, first_index: tuple[int, ...]):
        self.count = count
        self.first_index = first_index
        super().__init__(
            f"{count} non-finite value(s); first at index {first_index}"
        )


class ExtentMismatchError(DataError):
    """Two rasters that must share a spatial extent do not."""

    def __init__(self, extent_a: tuple[int, int], extent_b: tuple[int, int]):
        self.extent_a = extent_a
        self.extent_b = extent_b
        super().__init__(f"spatial extents differ: {extent_a} vs {extent_b}")


class WiringError(AfnetError):
    """A graph edge connects layers with incompatible shapes."""


class TrainingDivergedError(AfnetError):
    """The optimizer produced a non-finite loss."""

    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}")
