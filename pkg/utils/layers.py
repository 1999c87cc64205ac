# acrkn/utils/layers.py

from typing import List, Sequence, Tuple

import numpy as np

from utils.params import ParamStore
from utils.tensor import Parameter, Tensor, matmul, relu

Layer = Tuple[Parameter, Parameter]


def init_dense(params: ParamStore, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> Layer:
    """Weight (fan_in, fan_out) and bias drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    weight = params.add(f"{name}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    bias = params.add(f"{name}.bias", rng.uniform(-bound, bound, size=(fan_out,)))
    return weight, bias


def init_mlp(
        params: ParamStore,
        prefix: str,
        in_dim: int,
        hidden: Sequence[int],
        out_dim: int,
        rng: np.random.Generator,
) -> List[Layer]:
    widths = [in_dim, *hidden, out_dim]
    return [
        init_dense(params, f"{prefix}.{i}", widths[i], widths[i + 1], rng)
        for i in range(len(widths) - 1)
    ]


def dense(x, layer: Layer) -> Tensor:
    weight, bias = layer
    return matmul(x, weight) + bias


def mlp_forward(layers: Sequence[Layer], x) -> Tensor:
    """ReLU on every hidden layer, linear output."""
    h = x
    for layer in layers[:-1]:
        h = relu(dense(h, layer))
    return dense(h, layers[-1])
