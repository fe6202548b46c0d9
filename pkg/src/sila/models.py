"""Feedforward classifiers, multi-exit chains and parameter sets."""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    """Plain ReLU MLP: ``input_dim -> hidden... -> n_classes``."""

    input_dim: int
    hidden: tuple[int, ...]
    n_classes: int
    init: str = "kaiming_uniform"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"layer widths must be >= 1, got {self.widths}")
        if self.init not in _INITS:
            raise ValueError(f"unknown init scheme {self.init!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.n_classes)


@dataclass(frozen=True)
class MultiExitSpec:
    """Chain of hidden-layer blocks, with a linear classifier after each block.

    ``blocks[c]`` lists the hidden widths of block ``c``; block ``c`` feeds on
    the output of block ``c-1`` (or the input).  A single block is allowed so
    the chain can be compared against a plain network.
    """

    input_dim: int
    blocks: tuple[tuple[int, ...], ...]
    n_classes: int
    init: str = "kaiming_uniform"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(int(h) for h in b) for b in self.blocks))
        if not self.blocks:
            raise ValueError("a multi-exit network needs at least one block")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        for b in self.blocks:
            if not b or any(h < 1 for h in b):
                raise ValueError(f"every block needs >= 1 hidden layer of width >= 1, got {b}")
        if self.init not in _INITS:
            raise ValueError(f"unknown init scheme {self.init!r}")

    @property
    def n_exits(self) -> int:
        return len(self.blocks)

    def exit_costs(self) -> np.ndarray:
        """Cumulative multiply-accumulate count to produce exit ``c``.

        Reaching exit ``c`` runs blocks ``1..c`` and heads ``1..c``, as in
        early-exit evaluation where every earlier head is consulted first.
        """
        costs, total, width = [], 0, self.input_dim
        for block in self.blocks:
            for h in block:
                total += width * h
                width = h
            total += width * self.n_classes
            costs.append(float(total))
        return np.array(costs)


Spec = Union[NetworkSpec, MultiExitSpec]


def _kaiming_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _zeros(rng, fan_in, fan_out):
    return np.zeros((fan_in, fan_out))


_INITS = {"kaiming_uniform": _kaiming_uniform, "zeros": _zeros}


@dataclass
class ParameterSet:
    """Named weight/bias tensors for one network, in layer order."""

    spec: Spec
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def n_scalars(self) -> int:
        return sum(t.values.size for t in self)

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            self.spec, {k: Tensor(t.values, requires_grad=True) for k, t in self.tensors.items()}
        )

    def zero_grads(self) -> None:
        ad.zero_grads(self)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self.tensors.items()}

    def equals(self, other: "ParameterSet") -> bool:
        """Bitwise equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(
            a.values.shape == b.values.shape and a.values.tobytes() == b.values.tobytes()
            for a, b in zip(self, other)
        )


def _layers(spec: Spec) -> list[tuple[str, int, int]]:
    if isinstance(spec, NetworkSpec):
        w = spec.widths
        return [(f"layer{i}", w[i], w[i + 1]) for i in range(len(w) - 1)]
    out, width = [], spec.input_dim
    for c, block in enumerate(spec.blocks, start=1):
        for j, h in enumerate(block):
            out.append((f"block{c}.layer{j}", width, h))
            width = h
        out.append((f"head{c}", width, spec.n_classes))
    return out


def build_network(spec: Spec, seed: int) -> ParameterSet:
    """Fan-in scaled uniform weights, zero biases, drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    init = _INITS[spec.init]
    tensors = {}
    for name, fan_in, fan_out in _layers(spec):
        tensors[f"{name}.weight"] = Tensor(init(rng, fan_in, fan_out), requires_grad=True)
        tensors[f"{name}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True)
    return ParameterSet(spec, tensors)


def _linear(params: ParameterSet, name: str, h: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(h, params[f"{name}.weight"]), params[f"{name}.bias"])


def _check_input(spec: Spec, batch) -> Tensor:
    x = ad.as_tensor(batch)
    if x.values.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ad.ShapeError(f"forward: expected a B x {spec.input_dim} batch, got shape {x.shape}")
    return x


def forward(params: ParameterSet, batch) -> Tensor:
    """Logits ``B x N`` of a plain network."""
    spec = params.spec
    if not isinstance(spec, NetworkSpec):
        raise TypeError("forward expects a NetworkSpec parameter set; use forward_multi_exit")
    h = _check_input(spec, batch)
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        h = _linear(params, f"layer{i}", h)
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def forward_multi_exit(params: ParameterSet, batch) -> list[Tensor]:
    """Logits of every exit, shallowest first."""
    spec = params.spec
    if not isinstance(spec, MultiExitSpec):
        raise TypeError("forward_multi_exit expects a MultiExitSpec parameter set")
    h = _check_input(spec, batch)
    outs = []
    for c, block in enumerate(spec.blocks, start=1):
        for j in range(len(block)):
            h = ad.relu(_linear(params, f"block{c}.layer{j}", h))
        outs.append(_linear(params, f"head{c}", h))
    return outs


def penultimate_features(params: ParameterSet, batch) -> Tensor:
    """Post-ReLU output of the last hidden layer of a plain network."""
    spec = params.spec
    if not isinstance(spec, NetworkSpec):
        raise TypeError("penultimate_features expects a NetworkSpec parameter set")
    if not spec.hidden:
        raise ValueError("network has no hidden layer; there is no feature layer")
    h = _check_input(spec, batch)
    for i in range(len(spec.hidden)):
        h = ad.relu(_linear(params, f"layer{i}", h))
    return h


def perturb_parameters(
    params: ParameterSet, sigma: float, seed: int, antithetic: bool = False
) -> ParameterSet:
    """Copy of ``params`` with i.i.d. N(0, sigma^2) added to every scalar.

    ``antithetic=True`` subtracts the same draw instead of adding it.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    rng = np.random.default_rng(seed)
    out = params.copy()
    if sigma == 0:
        return out
    sign = -1.0 if antithetic else 1.0
    for t in out:
        t.values += sign * rng.normal(0.0, sigma, size=t.values.shape)
    return out


# -- checkpoints -------------------------------------------------------------


def _spec_to_dict(spec: Spec) -> dict:
    kind = "network" if isinstance(spec, NetworkSpec) else "multi_exit"
    return {"kind": kind, **asdict(spec)}


def spec_from_dict(d: dict) -> Spec:
    d = dict(d)
    kind = d.pop("kind")
    if kind == "network":
        return NetworkSpec(**d)
    if kind == "multi_exit":
        return MultiExitSpec(**d)
    raise ValueError(f"unknown network kind {kind!r}")


def save_parameters(params: ParameterSet, path) -> None:
    """Write an ``.npz`` container: a JSON header plus one float64 array per tensor."""
    header = {
        "format": "sila-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": _spec_to_dict(params.spec),
        "names": params.names(),
    }
    arrays = {f"p{i}": t.values for i, t in enumerate(params)}
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_parameters(path) -> ParameterSet:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(z["header"].tobytes().decode())
        if header.get("format") != "sila-checkpoint":
            raise ValueError(f"{path}: not a checkpoint file")
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
        spec = spec_from_dict(header["spec"])
        tensors = {
            name: Tensor(z[f"p{i}"].astype(np.float64), requires_grad=True)
            for i, name in enumerate(header["names"])
        }
    return ParameterSet(spec, tensors)
