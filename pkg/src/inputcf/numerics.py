"""Dense MLP arithmetic with exact reverse-mode gradients.

This is the substrate layer: plain numpy forward/backward passes for small
fully connected networks. Everything above it (branch networks, fusion heads)
composes these pieces.

Conventions
-----------
* A "matrix" is a 2-D numpy array, float32 or float64. Batches are stacked on
  axis 0, so a single vector is the row of a (1, n) array.
* ``MlpSpec.layer_widths`` includes the input width: ``[in, h1, ..., out]``
  describes ``len(layer_widths) - 1`` linear layers.
* The hidden ``activation`` is applied after every layer except the last,
  which uses ``output_activation``. Fusion heads use ``identity`` (regression)
  or ``sigmoid`` (probabilities); branch networks pass their own nonlinearity
  as the output kind because they apply it at every layer.
* Gradients follow the loss convention d(loss)/d(tensor); a backward pass is
  exact for the recorded forward, not an approximation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Standard selu constants.
SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805

ACTIVATION_KINDS = ("identity", "relu", "selu", "tanh", "sigmoid")


def activation_apply(kind: str, x: np.ndarray) -> np.ndarray:
    """Elementwise activation. ``x`` may be any shape; dtype is preserved."""
    if kind == "identity":
        return x
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        # Stable piecewise form; avoids overflow in exp for large |x|.
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    if kind == "selu":
        lam = x.dtype.type(SELU_LAMBDA)
        alpha = x.dtype.type(SELU_ALPHA)
        # expm1 only ever contributes on the x <= 0 side; clamping its
        # argument avoids spurious overflow warnings from the discarded lanes
        return np.where(x > 0, lam * x,
                        lam * alpha * np.expm1(np.minimum(x, 0)))
    raise ValueError(f"unknown activation kind: {kind!r}")


def activation_grad(kind: str, pre_activation: np.ndarray) -> np.ndarray:
    """Derivative of the activation evaluated at the pre-activation.

    relu' at exactly 0 is defined as 0 (subgradient choice); gradient checks
    must avoid sampling kink-adjacent points.
    """
    x = pre_activation
    if kind == "identity":
        return np.ones_like(x)
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    if kind == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    if kind == "sigmoid":
        s = activation_apply("sigmoid", x)
        return s * (1.0 - s)
    if kind == "selu":
        lam = x.dtype.type(SELU_LAMBDA)
        alpha = x.dtype.type(SELU_ALPHA)
        return np.where(x > 0, lam, lam * alpha * np.exp(np.minimum(x, 0)))
    raise ValueError(f"unknown activation kind: {kind!r}")


@dataclass(frozen=True)
class MlpSpec:
    """Shape and nonlinearity description of one MLP."""

    layer_widths: tuple[int, ...]
    activation: str = "identity"
    output_activation: str = "identity"
    use_biases: bool = True

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("need at least one layer (input and output width)")
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1, got {widths}")
        for kind in (self.activation, self.output_activation):
            if kind not in ACTIVATION_KINDS:
                raise ValueError(f"unknown activation kind: {kind!r}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1

    def activation_for_layer(self, layer: int) -> str:
        return self.output_activation if layer == self.num_layers - 1 else self.activation


@dataclass
class MlpParams:
    """Weights and biases for an ``MlpSpec``.

    ``weights[l]`` has shape ``(widths[l], widths[l+1])``; ``biases[l]`` has
    shape ``(widths[l+1],)``. With ``use_biases`` off the list holds zero
    vectors that are never trained.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype


def init_mlp_params(spec: MlpSpec, rng: np.random.Generator, dtype=np.float32) -> MlpParams:
    """Fan-based uniform weight init, zero biases.

    Weights are drawn uniformly in +-sqrt(6 / (fan_in + fan_out)), a default
    that behaves well for tanh/selu nets.
    """
    dtype = np.dtype(dtype)
    weights, biases = [], []
    widths = spec.layer_widths
    for l in range(spec.num_layers):
        fan_in, fan_out = widths[l], widths[l + 1]
        scale = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-scale, scale, size=(fan_in, fan_out)).astype(dtype)
        weights.append(w)
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(weights=weights, biases=biases)


def check_mlp_shapes(spec: MlpSpec, params: MlpParams) -> None:
    if len(params.weights) != spec.num_layers or len(params.biases) != spec.num_layers:
        raise ValueError(
            f"expected {spec.num_layers} layers, got {len(params.weights)} weight "
            f"and {len(params.biases)} bias entries"
        )
    widths = spec.layer_widths
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        want = (widths[l], widths[l + 1])
        if w.shape != want:
            raise ValueError(f"layer {l}: weight shape {w.shape}, expected {want}")
        if b.shape != (widths[l + 1],):
            raise ValueError(f"layer {l}: bias shape {b.shape}, expected ({widths[l + 1]},)")


@dataclass
class ForwardTape:
    """Single-use record of one forward pass, consumed by ``mlp_backward``."""

    spec: MlpSpec
    params: MlpParams
    layer_inputs: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)
    used: bool = False


def mlp_forward_batch(params: MlpParams, spec: MlpSpec, x: np.ndarray):
    """Forward pass over a batch: ``x`` is (batch, in_width).

    Returns ``(output, tape)`` where output is (batch, out_width). The tape
    retains every pre-activation needed for the backward pass.
    """
    check_mlp_shapes(spec, params)
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != spec.layer_widths[0]:
        raise ValueError(
            f"input shape {x.shape} incompatible with input width {spec.layer_widths[0]}"
        )
    if x.dtype != params.dtype:
        x = x.astype(params.dtype)
    tape = ForwardTape(spec=spec, params=params)
    a = x
    for l in range(spec.num_layers):
        tape.layer_inputs.append(a)
        z = a @ params.weights[l]
        if spec.use_biases:
            z = z + params.biases[l]
        tape.pre_activations.append(z)
        a = activation_apply(spec.activation_for_layer(l), z)
    return a, tape


def mlp_forward(params: MlpParams, spec: MlpSpec, x: np.ndarray):
    """Single-vector convenience wrapper around the batch forward."""
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D input vector, got shape {x.shape}")
    out, tape = mlp_forward_batch(params, spec, x[None, :])
    return out[0], tape


def mlp_backward_batch(tape: ForwardTape, output_grad: np.ndarray):
    """Reverse-mode pass. Returns ``(param_grads, input_grad)``.

    ``param_grads`` is an ``MlpParams`` of matching shapes holding
    d(loss)/d(weight) summed over the batch; ``input_grad`` is
    d(loss)/d(input) per batch row.
    """
    if tape.used:
        raise ValueError("tape already consumed; rerun the forward pass")
    tape.used = True
    spec, params = tape.spec, tape.params
    g = np.asarray(output_grad)
    if g.shape != tape.pre_activations[-1].shape:
        raise ValueError(
            f"output_grad shape {g.shape} does not match forward output "
            f"{tape.pre_activations[-1].shape}"
        )
    if g.dtype != params.dtype:
        g = g.astype(params.dtype)
    weight_grads = [None] * spec.num_layers
    bias_grads = [None] * spec.num_layers
    for l in range(spec.num_layers - 1, -1, -1):
        gz = g * activation_grad(spec.activation_for_layer(l), tape.pre_activations[l])
        weight_grads[l] = tape.layer_inputs[l].T @ gz
        bias_grads[l] = gz.sum(axis=0) if spec.use_biases else np.zeros_like(params.biases[l])
        g = gz @ params.weights[l].T
    return MlpParams(weights=weight_grads, biases=bias_grads), g


def mlp_backward(tape: ForwardTape, output_grad: np.ndarray):
    """Single-vector convenience wrapper around the batch backward."""
    output_grad = np.asarray(output_grad)
    if output_grad.ndim != 1:
        raise ValueError(f"expected a 1-D output gradient, got shape {output_grad.shape}")
    param_grads, input_grad = mlp_backward_batch(tape, output_grad[None, :])
    return param_grads, input_grad[0]


def zeros_like_params(params: MlpParams) -> MlpParams:
    return MlpParams(
        weights=[np.zeros_like(w) for w in params.weights],
        biases=[np.zeros_like(b) for b in params.biases],
    )
