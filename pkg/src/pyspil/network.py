"""Multilayer perceptrons stored as flat parameter vectors."""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveInt, field_validator, model_validator

from pyspil import autodiff as ad
from pyspil.errors import UsageError

FILE_MAGIC = "pyspil-params 1"

# Fraction of the action interval kept free at each end so squashed outputs never
# round onto a bound.
SQUASH_MARGIN = 1e-9


class NetTopology(BaseModel):
    model_config = ConfigDict(frozen=True)

    layer_sizes: List[PositiveInt]
    activations: List[str]
    output_squash: Optional[List[Tuple[float, float]]] = None

    @classmethod
    def mlp(
        cls,
        inputs: int,
        hidden: List[int],
        outputs: int,
        activation: str = "relu",
        squash: Optional[List[Tuple[float, float]]] = None,
    ) -> "NetTopology":
        """Hidden layers share `activation`; the output layer is affine."""
        return cls(
            layer_sizes=[inputs, *hidden, outputs],
            activations=[activation] * len(hidden) + ["identity"],
            output_squash=squash,
        )

    @field_validator("layer_sizes")
    @classmethod
    def at_least_two_layers(cls, v):
        if len(v) < 2:
            raise ValueError("a network needs at least an input and an output layer")
        return v

    @model_validator(mode="after")
    def consistent(self):
        if len(self.activations) != len(self.layer_sizes) - 1:
            raise ValueError("one activation per weight layer is required")
        for activation in self.activations:
            if activation not in ad.ACTIVATIONS:
                raise ValueError(f"unknown activation {activation!r}")
        if self.output_squash is not None:
            if len(self.output_squash) != self.layer_sizes[-1]:
                raise ValueError("output_squash needs one (lower, upper) pair per output")
            for lower, upper in self.output_squash:
                if not lower < upper:
                    raise ValueError("squash bounds must satisfy lower < upper")
        return self

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    @property
    def param_count(self) -> int:
        return sum(
            (n_in + 1) * n_out
            for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:])
        )

    def layout(self) -> List[Tuple[int, int, int, int]]:
        """(offset, fan_in, fan_out, bias_offset) for each weight layer, in storage order."""
        spans = []
        offset = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            spans.append((offset, n_in, n_out, offset + n_in * n_out))
            offset += (n_in + 1) * n_out
        return spans


@dataclass(frozen=True)
class ParamVector:
    """Immutable flat parameters of a network; updates build a new vector."""

    values: np.ndarray
    topology: NetTopology

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        if values.size != self.topology.param_count:
            raise UsageError(
                f"expected {self.topology.param_count} parameters, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise UsageError("parameters must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def initialize(cls, topology: NetTopology, rng: np.random.Generator) -> "ParamVector":
        """Weights uniform in +/- 1/sqrt(fan_in), biases zero."""
        values = np.zeros(topology.param_count)
        for offset, n_in, n_out, _ in topology.layout():
            limit = 1.0 / np.sqrt(n_in)
            values[offset : offset + n_in * n_out] = rng.uniform(-limit, limit, n_in * n_out)
        return cls(values, topology)

    @classmethod
    def zeros(cls, topology: NetTopology) -> "ParamVector":
        return cls(np.zeros(topology.param_count), topology)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.topology)

    def with_output_bias(self, bias: List[float]) -> "ParamVector":
        if len(bias) != self.topology.output_size:
            raise UsageError("output bias needs one entry per output")
        values = self.values.copy()
        _, _, n_out, bias_offset = self.topology.layout()[-1]
        values[bias_offset : bias_offset + n_out] = bias
        return self.with_values(values)

    def save(self, path: Union[str, Path]) -> None:
        """Write the text parameter format.

        Layout, one item per line::

            pyspil-params 1
            layer_sizes <n0> <n1> ...
            activations <a1> <a2> ...
            squash none | <lo1> <hi1> <lo2> <hi2> ...
            count <P>
            <P lines, one value each, weight matrices row-major then bias, layer by layer>

        Values use the shortest round-trip repr, so the file is byte-stable.
        """
        topology = self.topology
        if topology.output_squash is None:
            squash = "none"
        else:
            squash = " ".join(f"{lo!r} {hi!r}" for lo, hi in topology.output_squash)
        lines = [
            FILE_MAGIC,
            "layer_sizes " + " ".join(str(n) for n in topology.layer_sizes),
            "activations " + " ".join(topology.activations),
            f"squash {squash}",
            f"count {topology.param_count}",
            *(repr(float(v)) for v in self.values),
        ]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ParamVector":
        lines = Path(path).read_text().splitlines()
        if len(lines) < 5 or lines[0] != FILE_MAGIC:
            raise UsageError(f"{path} is not a pyspil parameter file")
        header = {}
        for line in lines[1:5]:
            key, _, rest = line.partition(" ")
            header[key] = rest.split()
        try:
            squash_fields = header["squash"]
            squash = None
            if squash_fields != ["none"]:
                numbers = [float(x) for x in squash_fields]
                squash = list(zip(numbers[0::2], numbers[1::2]))
            topology = NetTopology(
                layer_sizes=[int(x) for x in header["layer_sizes"]],
                activations=header["activations"],
                output_squash=squash,
            )
            count = int(header["count"][0])
            values = np.array([float(x) for x in lines[5 : 5 + count]])
        except (KeyError, IndexError, ValueError) as e:
            raise UsageError(f"malformed parameter file {path}: {e}") from e
        if values.size != count:
            raise UsageError(f"{path} is truncated: {values.size} of {count} values")
        return cls(values, topology)


def apply(flat: ad.Operand, topology: NetTopology, x: ad.Operand):
    """Network output for a flat parameter array or tape variable.

    Works on a single input vector or a batch of row vectors. Returns a numpy
    array when neither argument is a tape variable.
    """
    h = x
    for (offset, n_in, n_out, bias_offset), activation in zip(
        topology.layout(), topology.activations
    ):
        weight = flat[offset:bias_offset].reshape(n_in, n_out)
        bias = flat[bias_offset : bias_offset + n_out]
        h = ad.dense(h, weight, bias, activation)
    if topology.output_squash is not None:
        lower = np.array([lo for lo, _ in topology.output_squash])
        width = np.array([hi - lo for lo, hi in topology.output_squash])
        h = lower + width * (SQUASH_MARGIN + (1.0 - 2.0 * SQUASH_MARGIN) * ad.sigmoid(h))
    return h


def forward(params: ParamVector, input: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of them.

    Raises:
        UsageError: the trailing input dimension differs from the first layer size.
    """
    x = np.asarray(input, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != params.topology.input_size:
        raise UsageError(
            f"input has shape {x.shape}, network expects {params.topology.input_size} features"
        )
    return apply(params.values, params.topology, x)
