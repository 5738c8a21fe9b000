import logging
from dataclasses import dataclass

import numpy as np

from semharq.autodiff.tensor import Tensor
from semharq.autodiff.tensor import as_tensor
from semharq.errors import ConfigurationError

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity", "softplus")


@dataclass
class Dense:
    """One affine layer ``activation(x @ weight + bias)``."""

    weight: Tensor
    bias: Tensor
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(
                f"Unknown activation '{self.activation}'. Choose one of {ACTIVATIONS}."
            )
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ConfigurationError(
                f"Layer shapes do not chain: weight {self.weight.shape}, bias {self.bias.shape}."
            )

    @property
    def input_dim(self):
        return self.weight.shape[0]

    @property
    def output_dim(self):
        return self.weight.shape[1]

    def __call__(self, x):
        return getattr(x @ self.weight + self.bias, self.activation)()


class Mlp:
    r"""
    Multilayer perceptron built from :class:`Dense` layers.

    The network maps inputs of shape ``(..., input_dim)`` to outputs of shape
    ``(..., output_dim)``. Parameters are named ``<name>.<layer>.weight`` and
    ``<name>.<layer>.bias``; those names are the keys used in checkpoints.

    Parameters
    ----------
    layers : list of Dense
        Layers in evaluation order. Consecutive dimensions must chain.
    name : str, optional
        Prefix of the parameter names (default is ``"mlp"``).
    """

    def __init__(self, layers, name="mlp"):
        if not layers:
            raise ConfigurationError("An Mlp needs at least one layer.")
        for first, second in zip(layers[:-1], layers[1:]):
            if first.output_dim != second.input_dim:
                raise ConfigurationError(
                    f"Layer dimensions do not chain in '{name}': "
                    f"{first.output_dim} -> {second.input_dim}."
                )
        self.layers = list(layers)
        self.name = name
        for idx, layer in enumerate(self.layers):
            layer.weight.requires_grad = True
            layer.bias.requires_grad = True
            layer.weight.name = f"{name}.{idx}.weight"
            layer.bias.name = f"{name}.{idx}.bias"

    @classmethod
    def build(cls, sizes, hidden_activation="relu", output_activation="identity", seed=0, name="mlp"):
        """
        Create a Glorot-normal initialised network.

        Parameters
        ----------
        sizes : list of int
            Layer widths including input and output, e.g. ``[258, 256, 256, 64]``.
        hidden_activation : str, optional
            Activation of every layer but the last.
        output_activation : str, optional
            Activation of the last layer.
        seed : int or sequence of int, optional
            Seed of the initialisation stream.
        name : str, optional
            Parameter name prefix.

        Returns
        -------
        Mlp
            Freshly initialised network.
        """
        if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
            raise ConfigurationError(f"Invalid layer sizes {sizes} for '{name}'.")
        rng = np.random.default_rng(seed)
        layers = []
        for idx, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            std = np.sqrt(2.0 / (fan_in + fan_out))
            activation = output_activation if idx == len(sizes) - 2 else hidden_activation
            layers.append(Dense(
                Tensor(rng.standard_normal((fan_in, fan_out)) * std),
                Tensor(np.zeros(fan_out)),
                activation,
            ))
        return cls(layers, name=name)

    @classmethod
    def zeros(cls, sizes, hidden_activation="relu", output_activation="identity", name="mlp"):
        """Network with every parameter set to zero."""
        layers = []
        for idx, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            activation = output_activation if idx == len(sizes) - 2 else hidden_activation
            layers.append(Dense(Tensor(np.zeros((fan_in, fan_out))), Tensor(np.zeros(fan_out)), activation))
        return cls(layers, name=name)

    @classmethod
    def identity(cls, dim, name="mlp"):
        """Single identity layer (``weight = I``, ``bias = 0``)."""
        return cls([Dense(Tensor(np.eye(dim)), Tensor(np.zeros(dim)), "identity")], name=name)

    @property
    def input_dim(self):
        return self.layers[0].input_dim

    @property
    def output_dim(self):
        return self.layers[-1].output_dim

    def __call__(self, x):
        return forward(self, x)

    def parameters(self):
        """Ordered mapping of parameter names to tensors."""
        params = {}
        for layer in self.layers:
            params[layer.weight.name] = layer.weight
            params[layer.bias.name] = layer.bias
        return params

    def state_dict(self):
        """Copies of all parameter values keyed by name."""
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state):
        """
        Overwrite parameter values from ``state``.

        Raises
        ------
        ConfigurationError
            If a parameter is missing or its shape differs.
        """
        for name, param in self.parameters().items():
            if name not in state:
                raise ConfigurationError(f"Parameter '{name}' missing from state.")
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != param.shape:
                raise ConfigurationError(
                    f"Parameter '{name}' has shape {values.shape}, expected {param.shape}."
                )
            param.data = values.copy()


def forward(net, x):
    """
    Evaluate ``net`` on ``x`` while recording the computation graph.

    Parameters
    ----------
    net : Mlp
        Network to evaluate.
    x : Tensor or array_like
        Input whose last dimension equals ``net.input_dim``.

    Returns
    -------
    Tensor
        Output whose last dimension equals ``net.output_dim``.

    Raises
    ------
    ConfigurationError
        If the input dimension does not match.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] != net.input_dim:
        raise ConfigurationError(
            f"Input of shape {x.shape} does not match '{net.name}' input dimension {net.input_dim}."
        )
    for layer in net.layers:
        x = layer(x)
    return x


def backward(params, loss):
    """
    Compute gradients of a scalar ``loss`` for ``params``.

    Parameters
    ----------
    params : Mlp or dict of Tensor
        Parameters to differentiate.
    loss : Tensor
        Scalar loss node built from forward-graph operations.

    Returns
    -------
    dict
        Gradient arrays keyed by parameter name. Parameters the loss does not
        depend on receive exact zeros.
    """
    if isinstance(params, Mlp):
        params = params.parameters()
    for param in params.values():
        param.grad = None
    loss.backward()
    grads = {}
    for name, param in params.items():
        grads[name] = np.zeros_like(param.data) if param.grad is None else param.grad
    if not np.isfinite(loss.item()):
        logging.warning(f"Non-finite loss {loss.item()} during backward.")
    return grads
