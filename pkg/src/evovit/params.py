"""Parameter storage, RNG state, and weight initialization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class RngState:
    """Seeded PRNG wrapper.

    Uses numpy's PCG64 generator: identical seeds yield bit-identical draw
    sequences across runs and platforms.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, offset: int) -> "RngState":
        """Independent stream derived from this seed."""
        return RngState(self.seed + offset)

    def normal(self, std, shape):
        return self.gen.normal(0.0, std, size=shape)

    def trunc_normal(self, std, shape):
        """Normal(0, std) truncated to +/- 2 std by resampling."""
        out = self.gen.normal(0.0, std, size=shape)
        bad = np.abs(out) > 2.0 * std
        while bad.any():
            out[bad] = self.gen.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(out) > 2.0 * std
        return out

    def uniform(self, shape):
        return self.gen.random(size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    decay: bool = True          # participates in decoupled weight decay
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)


class ParamSet:
    """Ordered collection of named parameters with paired grad buffers."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name, value, decay=True) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value, decay)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def val(self, name: str) -> np.ndarray:
        return self._params[name].value

    def zero_grads(self):
        for p in self._params.values():
            p.grad[...] = 0.0

    def copy_values(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]):
        for n, v in values.items():
            p = self._params[n]
            if p.value.shape != v.shape:
                raise ValueError(
                    f"shape mismatch for {n}: {p.value.shape} vs {v.shape}"
                )
            p.value[...] = v
