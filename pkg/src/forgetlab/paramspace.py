"""Flat parameter vectors, deterministic perturbations, and seeding.

Parameters live in one contiguous float64 vector with a named layout of
(name, offset, shape) segments.  Perturbation draws use numpy's PCG64
generator through `standard_normal` (ziggurat), which numpy's stream
compatibility policy pins across versions; every draw site derives its
own child seed by hashing a master seed with string/int keys, so results
never depend on scheduling or evaluation order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward
from .errors import ContractViolation, InvalidArgument


def stable_hash(*keys):
    """Platform-independent 64-bit hash of mixed int/string keys."""
    h = hashlib.blake2b(digest_size=8)
    for key in keys:
        h.update(repr(key).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big")


def child_rng(master_seed, *keys):
    """Generator seeded from (master_seed, *keys); deterministic everywhere."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed) & (2**63 - 1), stable_hash(*keys)]))


@dataclass(frozen=True)
class ParamLayout:
    """Ordered (name, offset, shape) entries covering [0, dim) exactly once."""

    entries: tuple
    dim: int

    @classmethod
    def build(cls, named_shapes):
        entries = []
        offset = 0
        seen = set()
        for name, shape in named_shapes:
            if name in seen:
                raise InvalidArgument(f"duplicate parameter name '{name}'")
            seen.add(name)
            size = int(np.prod(shape)) if shape else 1
            entries.append((name, offset, tuple(shape)))
            offset += size
        return cls(entries=tuple(entries), dim=offset)

    def views(self, values):
        """Dict of reshaped views into `values` (no copies)."""
        out = {}
        for name, offset, shape in self.entries:
            size = int(np.prod(shape)) if shape else 1
            out[name] = values[offset:offset + size].reshape(shape)
        return out

    def slice_of(self, name):
        for entry_name, offset, shape in self.entries:
            if entry_name == name:
                size = int(np.prod(shape)) if shape else 1
                return offset, offset + size, shape
        raise InvalidArgument(f"unknown parameter name '{name}'")


@dataclass
class ParamVector:
    """A flat float64 parameter vector bound to a layout.

    Treated as immutable by every public operation; anything that changes
    parameters returns a fresh vector.
    """

    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise InvalidArgument("ParamVector values must be one-dimensional")
        if self.values.size != self.layout.dim:
            raise InvalidArgument(
                f"values length {self.values.size} != layout dim {self.layout.dim}"
            )

    @property
    def dim(self):
        return self.layout.dim

    def copy(self):
        return ParamVector(self.values.copy(), self.layout)

    def as_dict(self):
        return self.layout.views(self.values)

    def segment(self, name):
        lo, hi, shape = self.layout.slice_of(name)
        return self.values[lo:hi].reshape(shape)


@dataclass(frozen=True)
class Perturbation:
    """A concrete direction in parameter space plus how it was drawn."""

    delta: np.ndarray
    sigma: float
    seed: int


def gaussian_perturbation(dim, sigma, seed):
    """Draw delta ~ N(0, sigma^2 I) of the given dimension.

    Same (dim, sigma, seed) reproduces delta bit-exactly.
    """
    if dim < 1:
        raise InvalidArgument(f"dim must be >= 1, got {dim}")
    if not sigma > 0.0:
        raise InvalidArgument(f"sigma must be > 0, got {sigma}")
    rng = np.random.default_rng(int(seed) & (2**63 - 1))
    delta = rng.standard_normal(dim) * float(sigma)
    return Perturbation(delta=delta, sigma=float(sigma), seed=int(seed))


def rademacher_probe(dim, seed):
    """Vector of independent +/-1 entries (Hutchinson probe)."""
    if dim < 1:
        raise InvalidArgument(f"dim must be >= 1, got {dim}")
    rng = np.random.default_rng(int(seed) & (2**63 - 1))
    return rng.integers(0, 2, size=dim).astype(np.float64) * 2.0 - 1.0


def apply_perturbation(theta, delta, scale=1.0):
    """Return theta + scale * delta as a new ParamVector; theta unmodified."""
    if isinstance(delta, Perturbation):
        direction = delta.delta
    else:
        direction = np.asarray(delta, dtype=np.float64)
    if direction.shape != theta.values.shape:
        raise InvalidArgument(
            f"perturbation dim {direction.shape} != parameter dim {theta.values.shape}"
        )
    if scale == 0.0:
        return ParamVector(theta.values.copy(), theta.layout)
    return ParamVector(theta.values + float(scale) * direction, theta.layout)


def bind(theta, requires_grad=False):
    """Wrap each layout segment of theta in a Tensor leaf."""
    return {
        name: Tensor(view, requires_grad=requires_grad)
        for name, view in theta.as_dict().items()
    }


def collect_gradient(bound, layout):
    """Flatten leaf gradients (zeros where a leaf was unused) to a ParamVector."""
    flat = np.zeros(layout.dim)
    for name, offset, shape in layout.entries:
        leaf = bound[name]
        if leaf.grad is not None:
            size = int(np.prod(shape)) if shape else 1
            flat[offset:offset + size] = np.asarray(leaf.grad).reshape(-1)
    return ParamVector(flat, layout)


def forward_backward(output, bound, layout):
    """Evaluate a scalar Tensor expression and return (value, gradient).

    `bound` must be the leaf dict the expression was built from.
    """
    if output.data.size != 1:
        raise ContractViolation(
            f"forward_backward needs a scalar output, got shape {output.data.shape}"
        )
    backward(output)
    value = float(output.data)
    return value, collect_gradient(bound, layout)
