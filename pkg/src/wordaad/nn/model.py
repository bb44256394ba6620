from __future__ import annotations

import numpy as np

from .layers import Layer, TemporalConv


class Sequential:
    """A chain of layers with named parameters ``"<index>.<layer>.<param>"``."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    __call__ = forward

    def backward(self, grad):
        for layer in reversed(self.layers[1:]):
            grad = layer.backward(grad)
        first = self.layers[0]
        if isinstance(first, TemporalConv):
            # The input gradient of the first layer is never needed in training.
            return first.backward(grad, need_input_grad=False)
        return first.backward(grad)

    def backward_input(self, grad):
        """Backward pass that also returns the gradient with respect to the input."""
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def _named(self, attr):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in getattr(layer, attr).items():
                out[f"{i}.{layer.name}.{k}"] = v
        return out

    def params(self) -> dict[str, np.ndarray]:
        return self._named("params")

    def grads(self) -> dict[str, np.ndarray]:
        return self._named("grads")

    def buffers(self) -> dict[str, np.ndarray]:
        return self._named("buffers")

    def state(self) -> dict[str, np.ndarray]:
        """Copies of all parameters and buffers."""
        return {k: v.copy() for k, v in {**self.params(), **self.buffers()}.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for k in store:
                    key = f"{i}.{layer.name}.{k}"
                    if key not in state:
                        raise KeyError(f"state has no entry {key}")
                    if state[key].shape != store[k].shape:
                        raise ValueError(f"shape mismatch for {key}")
                    store[k] = np.array(state[key], dtype=store[k].dtype)
        self.zero_grad()

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self
