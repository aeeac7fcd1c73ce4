"""Feedforward networks with hand-written backpropagation, and Adam."""

from __future__ import annotations

import numpy as np

ACTIVATIONS = ("tanh", "linear")


def _act(name, z):
    return np.tanh(z) if name == "tanh" else z


def _dact(name, a):
    # derivative expressed through the activation output
    return 1.0 - a * a if name == "tanh" else np.ones_like(a)


class Mlp:
    """Fully connected network on row-batched inputs (batch x features).

    ``activations`` has one tag per layer; hidden layers default to tanh and
    the output layer to linear.
    """

    def __init__(self, sizes, activations=None, rng=None, out_scale=1.0):
        self.sizes = [int(s) for s in sizes]
        n_layers = len(self.sizes) - 1
        if activations is None:
            activations = ["tanh"] * (n_layers - 1) + ["linear"]
        if len(activations) != n_layers or any(a not in ACTIVATIONS for a in activations):
            raise ValueError("one activation tag per layer, from " + str(ACTIVATIONS))
        self.activations = list(activations)
        rng = np.random.default_rng(0) if rng is None else rng
        self.W, self.b = [], []
        for k, (i, o) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            lim = 1.0 / np.sqrt(i)
            if k == n_layers - 1:
                lim *= out_scale
            self.W.append(rng.uniform(-lim, lim, size=(o, i)))
            self.b.append(rng.uniform(-lim, lim, size=o) if k < n_layers - 1 else np.zeros(o))

    # -- evaluation
    def forward(self, X):
        """Returns (output, cache); cache holds every layer's activation."""
        a = np.atleast_2d(np.asarray(X, dtype=float))
        cache = [a]
        for W, b, name in zip(self.W, self.b, self.activations):
            a = _act(name, a @ W.T + b)
            cache.append(a)
        return a, cache

    def __call__(self, X):
        return self.forward(X)[0]

    def backward(self, cache, dY):
        """Gradients of sum(dY * output) w.r.t. weights, biases and input."""
        delta = np.asarray(dY, dtype=float) * _dact(self.activations[-1], cache[-1])
        gW = [None] * len(self.W)
        gb = [None] * len(self.W)
        for k in range(len(self.W) - 1, -1, -1):
            gW[k] = delta.T @ cache[k]
            gb[k] = delta.sum(axis=0)
            dx = delta @ self.W[k]
            if k > 0:
                delta = dx * _dact(self.activations[k - 1], cache[k])
        return gW, gb, dx

    # -- parameter vector views
    def params(self):
        return [*self.W, *self.b]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, theta):
        theta = np.asarray(theta, dtype=float)
        k = 0
        for p in self.params():
            p[...] = theta[k:k + p.size].reshape(p.shape)
            k += p.size

    @staticmethod
    def flatten_grads(gW, gb) -> np.ndarray:
        return np.concatenate([g.ravel() for g in [*gW, *gb]])

    def copy(self) -> "Mlp":
        new = Mlp.__new__(Mlp)
        new.sizes = list(self.sizes)
        new.activations = list(self.activations)
        new.W = [w.copy() for w in self.W]
        new.b = [b.copy() for b in self.b]
        return new

    def soft_update(self, source: "Mlp", tau: float):
        for p, q in zip(self.params(), source.params()):
            p *= 1.0 - tau
            p += tau * q

    def to_dict(self):
        return {
            "layer_sizes": self.sizes,
            "activations": self.activations,
            "weights": [w.tolist() for w in self.W],
            "biases": [b.tolist() for b in self.b],
        }

    @classmethod
    def from_dict(cls, d) -> "Mlp":
        new = cls.__new__(cls)
        new.sizes = [int(s) for s in d["layer_sizes"]]
        new.activations = list(d["activations"])
        new.W = [np.asarray(w, dtype=float).reshape(o, i)
                 for w, i, o in zip(d["weights"], new.sizes[:-1], new.sizes[1:])]
        new.b = [np.asarray(b, dtype=float).reshape(-1) for b in d["biases"]]
        if len(new.W) != len(new.sizes) - 1 or len(new.activations) != len(new.W):
            raise ValueError("inconsistent network description")
        for b, o in zip(new.b, new.sizes[1:]):
            if b.shape != (o,):
                raise ValueError("bias shape mismatch")
        return new


class Adam:
    def __init__(self, shapes, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        """In-place descent step on ``params`` along ``grads``."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
