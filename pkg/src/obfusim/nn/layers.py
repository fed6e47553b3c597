"""Neural building blocks on float64 numpy arrays.

Everything here is reverse-mode differentiable by hand: each layer's
``forward_cached`` returns the activations plus an opaque cache, and the
matching ``backward`` consumes that cache, accumulates parameter gradients
in place, and returns the gradient with respect to the layer input. Caches
are plain tuples handed back by the caller, so replaying an episode and
backpropagating through time is just a list of caches walked in reverse.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an input does not match the shape a layer was built for."""


def _require_shape(name: str, x: np.ndarray, expected_tail: tuple[int, ...]) -> None:
    if x.ndim != len(expected_tail) + 1 or x.shape[1:] != expected_tail:
        raise ShapeError(
            f"{name}: expected (batch, {', '.join(str(s) for s in expected_tail)}), "
            f"got {x.shape}"
        )


class Param:
    """A trainable array with an accumulated gradient of the same shape."""

    def __init__(self, value: np.ndarray, name: str = "") -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax; rows sum to 1 and entries are >= 0."""
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def one_hot(indices: np.ndarray, depth: int) -> np.ndarray:
    out = np.zeros((len(indices), depth), dtype=np.float64)
    out[np.arange(len(indices)), indices] = 1.0
    return out


def cross_entropy(probs: np.ndarray, labels: np.ndarray,
                  sample_weights: np.ndarray | None = None) -> float:
    """Mean (optionally weighted) negative log likelihood of integer labels."""
    p = probs[np.arange(len(labels)), labels]
    nll = -np.log(np.clip(p, 1e-12, None))
    if sample_weights is None:
        return float(np.mean(nll))
    return float(np.sum(nll * sample_weights) / np.sum(sample_weights))


def cross_entropy_dlogits(probs: np.ndarray, labels: np.ndarray,
                          sample_weights: np.ndarray | None = None) -> np.ndarray:
    """Gradient of ``cross_entropy`` with respect to the pre-softmax logits."""
    grad = probs - one_hot(labels, probs.shape[1])
    if sample_weights is None:
        return grad / len(labels)
    w = sample_weights / np.sum(sample_weights)
    return grad * w[:, None]


class TextCnnEncoder:
    """Convolutional encoder for a (rows x embed_dim) window of embeddings.

    For each kernel height k, filters of shape (k, embed_dim) slide over the
    row axis, followed by ReLU and max-pooling over positions. The pooled
    outputs of all heights are concatenated into a single feature vector.

    Args:
        rows: number of embedding rows the encoder accepts.
        embed_dim: width of each embedding row.
        kernel_heights: heights of the convolution kernels; each must be
            between 1 and ``rows``.
        filters_per_kernel: number of filters per height.
        rng: generator used for weight initialization.
    """

    def __init__(self, rows: int, embed_dim: int,
                 kernel_heights: Sequence[int] = (3, 4, 5),
                 filters_per_kernel: int = 100, *,
                 rng: np.random.Generator) -> None:
        if rows < 1 or embed_dim < 1:
            raise ShapeError(f"encoder needs positive dims, got rows={rows}, d={embed_dim}")
        for k in kernel_heights:
            if not 1 <= k <= rows:
                raise ShapeError(f"kernel height {k} outside [1, {rows}]")
        self.rows = rows
        self.embed_dim = embed_dim
        self.kernel_heights = tuple(kernel_heights)
        self.filters_per_kernel = filters_per_kernel
        self.weights: list[Param] = []
        self.biases: list[Param] = []
        for k in self.kernel_heights:
            fan_in = k * embed_dim
            w = glorot_uniform(rng, (filters_per_kernel, fan_in), fan_in, filters_per_kernel)
            self.weights.append(Param(w, name=f"conv{k}.w"))
            self.biases.append(Param(np.zeros(filters_per_kernel), name=f"conv{k}.b"))

    @property
    def output_dim(self) -> int:
        return self.filters_per_kernel * len(self.kernel_heights)

    def params(self) -> list[Param]:
        out: list[Param] = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def _windows(self, x: np.ndarray, k: int) -> np.ndarray:
        b = x.shape[0]
        positions = self.rows - k + 1
        return np.stack(
            [x[:, p:p + k, :].reshape(b, k * self.embed_dim) for p in range(positions)],
            axis=1,
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward_cached(x)
        return out

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None, :, :]
        _require_shape("TextCnnEncoder", x, (self.rows, self.embed_dim))
        pooled_parts = []
        per_kernel = []
        for k, w in zip(self.kernel_heights, self.weights):
            idx = self.kernel_heights.index(k)
            win = self._windows(x, k)                      # (B, P, k*d)
            scores = win @ w.value.T + self.biases[idx].value
            relu = np.maximum(scores, 0.0)                 # (B, P, F)
            arg = np.argmax(relu, axis=1)                  # (B, F)
            pooled = np.take_along_axis(relu, arg[:, None, :], axis=1)[:, 0, :]
            pooled_parts.append(pooled)
            per_kernel.append((win, scores, arg))
        out = np.concatenate(pooled_parts, axis=1)
        return out, (x.shape, per_kernel)

    def backward(self, d_out: np.ndarray, cache: tuple) -> np.ndarray:
        x_shape, per_kernel = cache
        d_out = np.asarray(d_out, dtype=np.float64)
        if d_out.ndim == 1:
            d_out = d_out[None, :]
        dx = np.zeros(x_shape, dtype=np.float64)
        f = self.filters_per_kernel
        for i, (k, (win, scores, arg)) in enumerate(zip(self.kernel_heights, per_kernel)):
            d_pooled = d_out[:, i * f:(i + 1) * f]          # (B, F)
            d_relu = np.zeros_like(scores)
            np.put_along_axis(d_relu, arg[:, None, :], d_pooled[:, None, :], axis=1)
            d_scores = d_relu * (scores > 0.0)
            self.weights[i].grad += np.einsum("bpf,bpk->fk", d_scores, win)
            self.biases[i].grad += d_scores.sum(axis=(0, 1))
            d_win = d_scores @ self.weights[i].value        # (B, P, k*d)
            positions = self.rows - k + 1
            for p in range(positions):
                dx[:, p:p + k, :] += d_win[:, p, :].reshape(-1, k, self.embed_dim)
        return dx


class LstmState(NamedTuple):
    h: np.ndarray
    c: np.ndarray


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class LstmCell:
    """Single LSTM cell with persistent (h, c) state handled by the caller.

    Gate layout in the stacked weight matrices is (input, forget, cell, output).
    """

    def __init__(self, input_dim: int, hidden_dim: int, *, rng: np.random.Generator) -> None:
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        n = hidden_dim
        self.wx = Param(glorot_uniform(rng, (4 * n, input_dim), input_dim, n), name="lstm.wx")
        self.wh = Param(glorot_uniform(rng, (4 * n, n), n, n), name="lstm.wh")
        self.b = Param(np.zeros(4 * n), name="lstm.b")

    def params(self) -> list[Param]:
        return [self.wx, self.wh, self.b]

    def init_state(self, batch: int = 1) -> LstmState:
        n = self.hidden_dim
        return LstmState(np.zeros((batch, n)), np.zeros((batch, n)))

    def step(self, x: np.ndarray, state: LstmState) -> tuple[np.ndarray, LstmState]:
        h, new_state, _ = self.step_cached(x, state)
        return h, new_state

    def step_cached(self, x: np.ndarray, state: LstmState
                    ) -> tuple[np.ndarray, LstmState, tuple]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        _require_shape("LstmCell", x, (self.input_dim,))
        n = self.hidden_dim
        z = x @ self.wx.value.T + state.h @ self.wh.value.T + self.b.value
        i = _sigmoid(z[:, 0 * n:1 * n])
        f = _sigmoid(z[:, 1 * n:2 * n])
        g = np.tanh(z[:, 2 * n:3 * n])
        o = _sigmoid(z[:, 3 * n:4 * n])
        c_new = f * state.c + i * g
        tanh_c = np.tanh(c_new)
        h_new = o * tanh_c
        cache = (x, state, i, f, g, o, tanh_c)
        return h_new, LstmState(h_new, c_new), cache

    def backward_step(self, d_h: np.ndarray, d_c: np.ndarray, cache: tuple
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Backprop one step; returns (d_x, d_h_prev, d_c_prev)."""
        x, state, i, f, g, o, tanh_c = cache
        d_o = d_h * tanh_c
        d_c_total = d_c + d_h * o * (1.0 - tanh_c ** 2)
        d_i = d_c_total * g
        d_f = d_c_total * state.c
        d_g = d_c_total * i
        d_c_prev = d_c_total * f
        dz = np.concatenate(
            [
                d_i * i * (1.0 - i),
                d_f * f * (1.0 - f),
                d_g * (1.0 - g ** 2),
                d_o * o * (1.0 - o),
            ],
            axis=1,
        )
        self.wx.grad += dz.T @ x
        self.wh.grad += dz.T @ state.h
        self.b.grad += dz.sum(axis=0)
        d_x = dz @ self.wx.value
        d_h_prev = dz @ self.wh.value
        return d_x, d_h_prev, d_c_prev

    def backward_sequence(self, d_h_list: Sequence[np.ndarray],
                          caches: Sequence[tuple]) -> list[np.ndarray]:
        """Backprop through a full episode of cached steps (reverse order).

        ``d_h_list[t]`` is the loss gradient flowing into the hidden output of
        step t from outside the recurrence. Returns d_x per step, in forward
        order.
        """
        if len(d_h_list) != len(caches):
            raise ShapeError(
                f"backward_sequence: {len(d_h_list)} grads vs {len(caches)} caches")
        d_x_rev: list[np.ndarray] = []
        d_h_next = np.zeros((1, self.hidden_dim))
        d_c_next = np.zeros((1, self.hidden_dim))
        for d_h_out, cache in zip(reversed(d_h_list), reversed(caches)):
            d_h_out = np.asarray(d_h_out, dtype=np.float64)
            if d_h_out.ndim == 1:
                d_h_out = d_h_out[None, :]
            if d_h_next.shape != d_h_out.shape:
                d_h_next = np.zeros_like(d_h_out)
                d_c_next = np.zeros_like(d_h_out)
            d_x, d_h_next, d_c_next = self.backward_step(
                d_h_out + d_h_next, d_c_next, cache)
            d_x_rev.append(d_x)
        return list(reversed(d_x_rev))


_ACTIVATIONS = ("relu", "tanh", "identity")


class DenseLayer:
    def __init__(self, in_dim: int, out_dim: int, activation: str = "identity", *,
                 rng: np.random.Generator) -> None:
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.w = Param(glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim), name="dense.w")
        self.b = Param(np.zeros(out_dim), name="dense.b")

    def params(self) -> list[Param]:
        return [self.w, self.b]

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        _require_shape("DenseLayer", x, (self.in_dim,))
        z = x @ self.w.value.T + self.b.value
        if self.activation == "relu":
            a = np.maximum(z, 0.0)
        elif self.activation == "tanh":
            a = np.tanh(z)
        else:
            a = z
        return a, (x, z, a)

    def backward(self, d_a: np.ndarray, cache: tuple) -> np.ndarray:
        x, z, a = cache
        d_a = np.asarray(d_a, dtype=np.float64)
        if d_a.ndim == 1:
            d_a = d_a[None, :]
        if self.activation == "relu":
            dz = d_a * (z > 0.0)
        elif self.activation == "tanh":
            dz = d_a * (1.0 - a ** 2)
        else:
            dz = d_a
        self.w.grad += dz.T @ x
        self.b.grad += dz.sum(axis=0)
        return dz @ self.w.value


class DenseHead:
    """Stack of dense layers with an optional softmax on the final output.

    Args:
        sizes: layer widths including input and output, e.g. (256, 64, 2).
        final: "softmax" to emit probabilities, "identity" for raw outputs.
        hidden_activation: activation for every layer except the last.
        rng: generator for weight init.
    """

    def __init__(self, sizes: Sequence[int], final: str = "identity",
                 hidden_activation: str = "relu", *, rng: np.random.Generator) -> None:
        if len(sizes) < 2:
            raise ValueError("DenseHead needs at least input and output sizes")
        if final not in ("softmax", "identity"):
            raise ValueError(f"unknown final mode {final!r}")
        self.sizes = tuple(sizes)
        self.final = final
        self.layers = []
        for i in range(len(sizes) - 1):
            act = hidden_activation if i < len(sizes) - 2 else "identity"
            self.layers.append(DenseLayer(sizes[i], sizes[i + 1], act, rng=rng))

    def params(self) -> list[Param]:
        out: list[Param] = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward_cached(x)
        return out

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        caches = []
        for layer in self.layers:
            x, cache = layer.forward_cached(x)
            caches.append(cache)
        logits = x
        out = softmax(logits) if self.final == "softmax" else logits
        return out, (caches, logits)

    def backward_from_logits(self, d_logits: np.ndarray, cache: tuple) -> np.ndarray:
        """Backprop from a gradient expressed at the final pre-softmax logits."""
        caches, _ = cache
        d = d_logits
        for layer, layer_cache in zip(reversed(self.layers), reversed(caches)):
            d = layer.backward(d, layer_cache)
        return d

    def backward(self, d_out: np.ndarray, cache: tuple) -> np.ndarray:
        if self.final == "softmax":
            raise ValueError("softmax head: use backward_from_logits with a logit gradient")
        return self.backward_from_logits(d_out, cache)
