"""
Feedforward ReLU networks with hand-written reverse mode and Adam.

Networks of identical architecture are stored stacked along a leading "count"
axis so that the d per-asset networks psi_j evaluate in one batched matmul.
A single network is the count == 1 case. Every network maps a scalar to a
scalar: ReLU on hidden layers, identity on the output layer.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import CheckpointError, InvalidArgumentError
from app.core.logging import get_logger
from app.core.seeding import make_rng

logger = get_logger(__name__)

XAVIER_VARIANTS = ("uniform", "normal")


@dataclass
class Mlp:
    """Stack of ``count`` scalar networks sharing one architecture."""

    widths: Tuple[int, ...]
    weights: List[np.ndarray]  # (count, fan_in, fan_out)
    biases: List[np.ndarray]   # (count, fan_out)

    @property
    def count(self) -> int:
        return self.weights[0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.weights)

    def parameters(self) -> List[np.ndarray]:
        """Parameter arrays in the order W0, b0, W1, b1, ..."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def parameter_count(self) -> int:
        """Parameters of one network of the stack."""
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]))


def _check_widths(widths: Sequence[int]) -> Tuple[int, ...]:
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise InvalidArgumentError("a network needs at least an input and an output width")
    if any(w < 1 for w in widths):
        raise InvalidArgumentError(f"layer widths must be positive, got {widths}")
    if widths[0] != 1 or widths[-1] != 1:
        raise InvalidArgumentError(f"scalar networks need input and output width 1, got {widths}")
    return widths


def init_xavier(widths: Sequence[int], seed: int, count: int = 1, variant: str = "uniform") -> Mlp:
    """
    Xavier (Glorot) initialization with zero biases.

    Uniform: W ~ U[-a, a] with a = sqrt(6 / (fan_in + fan_out)).
    Normal:  W ~ N(0, 2 / (fan_in + fan_out)).

    Raises:
        InvalidArgumentError: On empty or invalid widths
    """
    widths = _check_widths(widths)
    if count < 1:
        raise InvalidArgumentError(f"network count must be positive, got {count}")
    if variant not in XAVIER_VARIANTS:
        raise InvalidArgumentError(f"unknown Xavier variant {variant!r}")
    rng = make_rng(seed, "xavier", variant)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        if variant == "uniform":
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(count, fan_in, fan_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(count, fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros((count, fan_out)))
    return Mlp(widths, weights, biases)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _stack_inputs(net: Mlp, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("network inputs must be finite")
    if net.count == 1 and x.ndim == 1:
        return x[None, :, None]
    if x.ndim != 2 or x.shape[1] != net.count:
        raise InvalidArgumentError(f"expected inputs of shape (n, {net.count}), got {x.shape}")
    return x.T[:, :, None]


def _unstack(net: Mlp, stacked: np.ndarray, like: np.ndarray) -> np.ndarray:
    out = stacked[:, :, 0]
    if net.count == 1 and np.ndim(like) == 1:
        return out[0]
    return out.T


def forward(net: Mlp, inputs: np.ndarray) -> np.ndarray:
    """
    Evaluate the networks at each scalar input.

    ``inputs`` is a vector (count == 1) or an (n, count) matrix whose column j
    feeds network j. The result has the same shape.
    """
    h = _stack_inputs(net, inputs)
    last = net.depth - 1
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = np.matmul(h, w) + b[:, None, :]
        if layer != last:
            np.maximum(h, 0.0, out=h)
    return _unstack(net, h, inputs)


class ForwardTape:
    """Recorded forward pass, replayed backwards by ``backward``."""

    def __init__(self, net: Mlp, inputs: np.ndarray):
        self.net = net
        self._like = inputs
        h = _stack_inputs(net, inputs)
        self.layer_inputs: List[np.ndarray] = []
        self.pre_activations: List[np.ndarray] = []
        last = net.depth - 1
        for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
            self.layer_inputs.append(h)
            z = np.matmul(h, w) + b[:, None, :]
            self.pre_activations.append(z)
            h = z if layer == last else np.maximum(z, 0.0)
        self._output = h

    @property
    def outputs(self) -> np.ndarray:
        return _unstack(self.net, self._output, self._like)

    def activation_pattern(self) -> List[np.ndarray]:
        """ReLU masks of the hidden layers."""
        return [z > 0.0 for z in self.pre_activations[:-1]]

    def backward(self, grad_outputs: np.ndarray) -> List[np.ndarray]:
        """Gradients w.r.t. the parameters, given dLoss/dOutputs (same shape as outputs)."""
        g = _stack_inputs_unchecked(self.net, grad_outputs)
        grads: List[np.ndarray] = [None] * (2 * self.net.depth)
        for layer in reversed(range(self.net.depth)):
            if layer != self.net.depth - 1:
                # ReLU subgradient at 0 is 0
                g = g * (self.pre_activations[layer] > 0.0)
            grads[2 * layer] = np.matmul(self.layer_inputs[layer].transpose(0, 2, 1), g)
            grads[2 * layer + 1] = g.sum(axis=1)
            if layer > 0:
                g = np.matmul(g, self.net.weights[layer].transpose(0, 2, 1))
        return grads


def _stack_inputs_unchecked(net: Mlp, values: np.ndarray) -> np.ndarray:
    x = np.asarray(values, dtype=float)
    if net.count == 1 and x.ndim == 1:
        return x[None, :, None]
    return x.T[:, :, None]


def activation_pattern(net: Mlp, inputs: np.ndarray) -> List[np.ndarray]:
    return ForwardTape(net, inputs).activation_pattern()


@dataclass
class LossTape:
    """
    A scalar loss with everything needed to differentiate it.

    ``parts`` pairs forward tapes of one network stack with dLoss/dOutputs of
    that pass; several passes (for example two sample batches) add up.
    ``grad_b`` is dLoss/db for the linear weights outside the networks.
    """

    loss: float
    parts: List[Tuple[ForwardTape, np.ndarray]]
    grad_b: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class Gradients:
    networks: List[np.ndarray]
    b: np.ndarray

    def flat(self) -> List[np.ndarray]:
        return list(self.networks) + [self.b]


def grad(loss_tape: LossTape) -> Gradients:
    """Reverse-mode gradients for every network parameter and every b_i."""
    total: Optional[List[np.ndarray]] = None
    for tape, upstream in loss_tape.parts:
        part = tape.backward(upstream)
        total = part if total is None else [a + p for a, p in zip(total, part)]
    if total is None:
        raise InvalidArgumentError("loss tape records no network pass")
    return Gradients(networks=total, b=np.array(loss_tape.grad_b, dtype=float, copy=True))


@dataclass
class AdamState:
    """First and second moments per parameter array, plus the step counter."""

    first: List[np.ndarray]
    second: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> Tuple[Sequence[np.ndarray], AdamState]:
    """
    One Adam update with bias correction, applied in place.

    Raises:
        InvalidArgumentError: If parameter, gradient and moment shapes differ
    """
    if len(params) != len(grads) or len(params) != len(state.first):
        raise InvalidArgumentError("parameter, gradient and moment lists differ in length")
    for p, g, m in zip(params, grads, state.first):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise InvalidArgumentError(f"shape mismatch: parameter {p.shape}, gradient {np.shape(g)}, moment {m.shape}")
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.first, state.second):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return params, state


def save_checkpoint(path: Path | str, net: Mlp, b: np.ndarray, adam: AdamState, extra: Optional[dict] = None) -> Path:
    """Write networks, linear weights and optimizer state as JSON."""
    path = Path(path)
    payload = {
        "widths": list(net.widths),
        "count": net.count,
        "weights": [w.tolist() for w in net.weights],
        "biases": [v.tolist() for v in net.biases],
        "b": np.asarray(b).tolist(),
        "adam": {
            "first": [m.tolist() for m in adam.first],
            "second": [v.tolist() for v in adam.second],
            "step": adam.step,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
        },
        "extra": extra or {},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload))
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path: Path | str) -> Tuple[Mlp, np.ndarray, AdamState, dict]:
    """
    Restore a checkpoint written by ``save_checkpoint``.

    Raises:
        CheckpointError: If the file is missing or malformed
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
        net = Mlp(
            widths=tuple(payload["widths"]),
            weights=[np.asarray(w, dtype=float) for w in payload["weights"]],
            biases=[np.asarray(v, dtype=float) for v in payload["biases"]],
        )
        b = np.asarray(payload["b"], dtype=float)
        shapes = [p.shape for p in net.parameters()] + [b.shape]
        adam_payload = payload["adam"]
        first = [np.asarray(m, dtype=float).reshape(s) for m, s in zip(adam_payload["first"], shapes)]
        second = [np.asarray(v, dtype=float).reshape(s) for v, s in zip(adam_payload["second"], shapes)]
        adam = AdamState(first, second, int(adam_payload["step"]), adam_payload["beta1"],
                         adam_payload["beta2"], adam_payload["eps"])
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Failed to restore checkpoint {path}: {e}") from e
    return net, b.reshape(-1), adam, payload.get("extra", {})
