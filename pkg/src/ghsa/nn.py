"""Fully connected ReLU networks with a hand-written backward pass, and Adam."""

from dataclasses import dataclass, field

import numpy as np

from ._fused import adam_, bias_add_, bias_relu_, colsum, relu_mask_colsum_

# Number of MLP forward calls made so far in this process. The baked fast
# path asserts this does not move.
_QUERY_COUNT = [0]


def mlp_query_count():
    return _QUERY_COUNT[0]


class MLP:
    """``in -> [hidden]*depth -> out`` ReLU network.

    The last layer is zero-initialised so a fresh network predicts zeros.
    Inputs may be split into a per-row part and a ``shared`` vector that is
    the same for every row (per-frame conditioning); the shared part enters
    the first layer as a bias, which is exact and saves a large matmul.
    """

    def __init__(self, in_dim, out_dim, hidden=128, depth=4, rng=None, dtype=np.float32,
                 shared_dim=0):
        rng = np.random.default_rng(rng)
        self.in_dim = in_dim
        self.shared_dim = shared_dim
        self.out_dim = out_dim
        dims = [in_dim + shared_dim] + [hidden] * depth + [out_dim]
        self.weights = []
        self.biases = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            if i == len(dims) - 2:
                W = np.zeros((a, b))
                bias = np.zeros(b)
            else:
                # He-uniform, the usual default for ReLU stacks
                lim = np.sqrt(6.0 / a)
                W = rng.uniform(-lim, lim, size=(a, b))
                bias = rng.uniform(-1 / np.sqrt(a), 1 / np.sqrt(a), size=b)
            self.weights.append(W.astype(dtype))
            self.biases.append(bias.astype(dtype))

    @property
    def dtype(self):
        return self.weights[0].dtype

    def parameters(self):
        """Flat name -> array mapping (views, so in-place updates stick)."""
        params = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            params[f"W{i}"] = W
            params[f"b{i}"] = b
        return params

    def load_parameters(self, params):
        for i in range(len(self.weights)):
            self.weights[i][...] = params[f"W{i}"]
            self.biases[i][...] = params[f"b{i}"]

    def astype(self, dtype):
        self.weights = [w.astype(dtype) for w in self.weights]
        self.biases = [b.astype(dtype) for b in self.biases]
        return self

    def forward(self, x, shared=None):
        """Returns ``(out, cache)``; ``out`` is the pre-activation output."""
        _QUERY_COUNT[0] += 1
        x = np.asarray(x, dtype=self.dtype)
        W0 = self.weights[0]
        b0 = self.biases[0]
        if self.shared_dim:
            b0 = b0 + np.asarray(shared, dtype=self.dtype) @ W0[self.in_dim:]
        h = x @ W0[:self.in_dim]
        acts = [x]
        n = len(self.weights)
        for i in range(1, n):
            bias_relu_(h, b0 if i == 1 else self.biases[i - 1])
            acts.append(h)
            h = h @ self.weights[i]
        bias_add_(h, b0 if n == 1 else self.biases[-1])
        return h, (acts, shared)

    def __call__(self, x, shared=None):
        return self.forward(x, shared)[0]

    def backward(self, cache, d_out, need_input=False):
        """Returns ``(grads, d_x, d_shared)`` for an upstream ``d_out``."""
        acts, shared = cache
        grads = {}
        g = np.asarray(d_out, dtype=self.dtype)
        n = len(self.weights)
        for i in range(n - 1, 0, -1):
            a = acts[i]
            grads[f"W{i}"] = a.T @ g
            if i == n - 1:
                grads[f"b{i}"] = colsum(g)
            g = g @ self.weights[i].T
            grads[f"b{i - 1}"] = relu_mask_colsum_(g, a)
        W0 = self.weights[0]
        if n == 1:
            grads["b0"] = colsum(g)
        gsum = grads["b0"]
        dW0 = np.empty_like(W0)
        dW0[:self.in_dim] = acts[0].T @ g
        d_shared = None
        if self.shared_dim:
            dW0[self.in_dim:] = np.outer(np.asarray(shared, dtype=self.dtype), gsum)
            d_shared = W0[self.in_dim:] @ gsum
        grads["W0"] = dW0
        d_x = g @ W0[:self.in_dim].T if need_input else None
        return grads, d_x, d_shared


@dataclass
class Adam:
    """Adam over a dict of named arrays, updated in place."""

    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    state: dict = field(default_factory=dict)

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        for name, g in grads.items():
            if g is None:
                continue
            p = params[name]
            st = self.state.get(name)
            if st is None or st["m"].shape != p.shape:
                st = {"m": np.zeros_like(p), "v": np.zeros_like(p), "t": 0}
                self.state[name] = st
            st["t"] += 1
            m, v = st["m"], st["v"]
            t = st["t"]
            step = lr * np.sqrt(1 - b2 ** t) / (1 - b1 ** t)
            adam_(p, np.ascontiguousarray(g, dtype=p.dtype), m, v, b1, b2, step, self.eps)

    def reindex(self, name, index):
        """Gather per-row moments after densification (new rows start at 0)."""
        st = self.state.get(name)
        if st is None:
            return
        for key in ("m", "v"):
            arr = st[key]
            out = np.zeros((len(index),) + arr.shape[1:], dtype=arr.dtype)
            ok = index >= 0
            out[ok] = arr[index[ok]]
            st[key] = out
