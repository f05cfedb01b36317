"""Named parameter registry and convolution helpers shared by the network modules."""
from __future__ import annotations

import zlib
from collections.abc import Iterator, MutableMapping

import numpy as np

from .autograd import Tensor
from .ops import ConvSpec, conv2d, conv_transpose2d


def param_rng(seed: int, name: str) -> np.random.Generator:
    # one stream per (root seed, name): toggling a module never perturbs the others
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


class ModelParams(MutableMapping):
    """Ordered name -> Tensor registry; iteration follows insertion order."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._items: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self._items[name] = value

    def __delitem__(self, name: str) -> None:
        del self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __repr__(self) -> str:
        return f"ModelParams({len(self)} tensors, {self.count()} values)"

    def count(self, prefix: str = "") -> int:
        return sum(t.data.size for n, t in self._items.items() if n.startswith(prefix))

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._items[name] = t
        return t

    def declare_conv(self, name: str, spec: ConvSpec, zero: bool = False, relu: bool = False) -> None:
        """Register ``name.weight`` and a zero ``name.bias``.

        Weights are uniform with variance ``gain / fan_in``: gain 2 when a ReLU follows,
        gain 1 for linear layers, so activations keep their scale through long linear chains.
        """
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        self._declare(name, spec.weight_shape, fan_in, spec.has_bias, spec.out_channels, zero, relu)

    def declare_deconv(self, name: str, in_channels: int, out_channels: int, relu: bool = False) -> None:
        self._declare(name, (in_channels, out_channels, 3, 3), in_channels * 9, True, out_channels, False, relu)

    def _declare(self, name, shape, fan_in, has_bias, out_c, zero, relu):
        if zero:
            w = np.zeros(shape)
        else:
            bound = np.sqrt((6.0 if relu else 3.0) / fan_in)
            w = param_rng(self.seed, name + ".weight").uniform(-bound, bound, size=shape)
        self.add(name + ".weight", w)
        if has_bias:
            self.add(name + ".bias", np.zeros((1, out_c, 1, 1)))

    def has(self, name: str) -> bool:
        return name + ".weight" in self._items

    def spec_of(self, name: str, stride: int = 1) -> ConvSpec:
        out_c, in_c, k, _ = self._items[name + ".weight"].shape
        return ConvSpec(in_c, out_c, kernel=k, stride=stride, has_bias=name + ".bias" in self._items)

    def conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        return conv2d(x, self.spec_of(name, stride), self[name + ".weight"], self._items.get(name + ".bias"))

    def deconv(self, name: str, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self[name + ".weight"], self._items.get(name + ".bias"))

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: t.shape for n, t in self._items.items()}

    def copy(self) -> "ModelParams":
        out = ModelParams(self.seed)
        for n, t in self._items.items():
            out.add(n, t.data.copy())
        return out


def conv_size(in_c: int, out_c: int, k: int, bias: bool = True) -> int:
    """Closed-form parameter count of one convolution."""
    return out_c * in_c * k * k + (out_c if bias else 0)
