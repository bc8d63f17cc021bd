"""Input validation helpers and the package's error taxonomy."""

from __future__ import annotations

import numpy as np


class InputError(ValueError):
    """Malformed input data or configuration (CLI exit code 2)."""


class SchemaError(InputError):
    """A JSON document does not match the expected schema or version."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss (CLI exit code 3)."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


def check_bitmap(bitmap, name: str = "bitmap") -> np.ndarray:
    """Coerce to a non-empty 2-D boolean grid."""
    grid = np.asarray(bitmap)
    if grid.ndim != 2 or grid.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D grid, got shape {grid.shape}")
    return grid.astype(bool)


def check_prob_grid(grid, name: str = "pred_probs") -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2 or grid.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D grid, got shape {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise ValueError(f"{name} contains non-finite values")
    return grid


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "grids") -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} have mismatched dimensions: {a.shape} vs {b.shape}")


def check_finite_matrix(matrix, name: str = "cost") -> np.ndarray:
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def check_unit_interval(value: float, name: str, open_ends: bool = False) -> float:
    value = float(value)
    if open_ends:
        if not 0.0 < value < 1.0:
            raise ValueError(f"{name} must lie strictly inside (0, 1), got {value}")
    elif not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value
