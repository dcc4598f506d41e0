"""Deterministic dense linear algebra and probability primitives.

Everything operates on float64 numpy arrays.  Vectors are 1-d arrays,
matrices are row-major 2-d arrays.  All reductions use numpy's fixed
left-to-right summation on contiguous arrays, so results are
reproducible bit-for-bit across runs on the same platform.

Randomness throughout the package flows from :func:`make_rng`, a PCG64
generator seeded via numpy's SeedSequence (a splitmix-style seeding
scheme).  The generator choice is fixed; identical seeds give identical
streams.
"""

import numpy as np

__all__ = [
    "CoadaptError",
    "InvalidArgumentError",
    "DegenerateInputError",
    "FormatError",
    "DivergenceError",
    "make_rng",
    "as_vector",
    "as_matrix",
    "softmax",
    "softmax_rows",
    "cosine_similarity",
    "l2_normalize",
    "argmax",
]


class CoadaptError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(CoadaptError):
    """An argument violates a documented precondition."""


class DegenerateInputError(CoadaptError):
    """Input is degenerate (zero-norm vector, empty class, ...)."""


class FormatError(CoadaptError):
    """A binary or CSV file does not match its documented format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(CoadaptError):
    """Training produced a non-finite loss or parameter."""


def make_rng(seed):
    """Return the package-wide deterministic generator for ``seed``."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_vector(v, name="vector"):
    """Coerce to a finite float64 1-d array, validating shape and content."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgumentError(f"{name} must be 1-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return arr


def as_matrix(m, name="matrix"):
    """Coerce to a finite float64 row-major 2-d array."""
    arr = np.ascontiguousarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidArgumentError(f"{name} must be 2-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return arr


def softmax(logits, temperature=1.0):
    """Temperature softmax with max-subtraction for numerical stability.

    Computes ``exp((g - max(g)) / T) / sum(...)``.  Entries lie in (0, 1]
    and sum to 1 within 1e-12.  Lowering the temperature sharpens the
    distribution without changing the argmax.
    """
    g = as_vector(logits, "logits")
    if g.size == 0:
        raise InvalidArgumentError("softmax of empty vector")
    if not np.isfinite(temperature) or temperature <= 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    z = (g - g.max()) / float(temperature)
    e = np.exp(z)
    return e / e.sum()


def softmax_rows(logits, temperature=1.0):
    """Row-wise :func:`softmax` for a 2-d logits array."""
    g = as_matrix(logits, "logits")
    if g.shape[1] == 0:
        raise InvalidArgumentError("softmax over zero classes")
    if not np.isfinite(temperature) or temperature <= 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    z = (g - g.max(axis=1, keepdims=True)) / float(temperature)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cosine_similarity(a, b):
    """Cosine of the angle between two vectors, in [-1, 1].

    Raises :class:`DegenerateInputError` if either vector has zero norm.
    """
    va = as_vector(a, "a")
    vb = as_vector(b, "b")
    if va.shape != vb.shape:
        raise InvalidArgumentError(f"length mismatch: {va.size} vs {vb.size}")
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of zero-norm vector")
    return float(np.dot(va, vb) / (na * nb))


def l2_normalize(v):
    """Scale a vector to unit euclidean norm."""
    arr = as_vector(v)
    n = np.linalg.norm(arr)
    if n == 0.0:
        raise DegenerateInputError("cannot normalize zero vector")
    return arr / n


def l2_normalize_rows(m):
    """Unit-normalize every row of a matrix; zero rows are an error."""
    arr = as_matrix(m)
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms == 0.0):
        idx = int(np.argmin(norms))
        raise DegenerateInputError(f"row {idx} has zero norm")
    return arr / norms[:, None]


def argmax(v):
    """Index of the maximum entry; ties break to the lowest index."""
    arr = as_vector(v)
    if arr.size == 0:
        raise InvalidArgumentError("argmax of empty vector")
    return int(np.argmax(arr))
