"""Neural architectures: per-agent heads, hypernetworks, and mixing networks.

Every network exposes two evaluation paths that must agree numerically:

* ``forward(...)`` builds autodiff graph nodes (used inside losses);
* ``values(...)`` / ``eval_values(...)`` are plain-numpy evaluations used in
  hot no-gradient paths (action selection, rollouts, targets).

The concave mixer follows the layered form
``z1 = W0 x + b0``, ``z_{i+1} = relu(W_i [z1..z_i] + b_i)``, and a negated
non-negative output layer ``zk = -W_{k-1} [z1..z_{k-1}] + b_{k-1}``.  All
inner weights W_1..W_{k-1} pass through an absolute-value activation, which
keeps the output concave in the utility inputs for any state; W0 is left
sign-free so the mixer can be non-monotonic.  W0's hypernet bias starts
negative: with W0 <= 0 the composition is non-decreasing in every utility, so
training begins in an orientation where larger per-agent utilities mean
larger joint values.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .params import ParameterSet

MASK_SENTINEL = -1e9      # added to utilities of unavailable actions
LOGIT_MASK = -1e30        # added to policy logits of unavailable actions


def _uniform(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


class AvailabilityError(ValueError):
    """An agent was left with no available action."""


# ---------------------------------------------------------------------------
# feed-forward heads
# ---------------------------------------------------------------------------

class FeedForward:
    """Plain MLP with relu hidden layers; hidden may be empty."""

    def __init__(self, name: str, rng: np.random.Generator, input_dim: int,
                 hidden: list[int], output_dim: int):
        self.params = ParameterSet(name)
        self.sizes = [input_dim] + list(hidden) + [output_dim]
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            s = 1.0 / np.sqrt(fan_in)
            self.params.add(f"w{i}", _uniform(rng, (fan_out, fan_in), s))
            self.params.add(f"b{i}", _uniform(rng, (fan_out,), s))
        self.n_layers = len(self.sizes) - 1

    def forward(self, x) -> Node:
        h = x if isinstance(x, Node) else ad.constant(x)
        for i in range(self.n_layers):
            h = ad.affine(h, self.params[f"w{i}"], self.params[f"b{i}"])
            if i < self.n_layers - 1:
                h = ad.relu(h)
        return h

    def values(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for i in range(self.n_layers):
            h = h @ self.params[f"w{i}"].value.T + self.params[f"b{i}"].value
            if i < self.n_layers - 1:
                np.maximum(h, 0.0, out=h)
        return h


class AgentUtilityNet(FeedForward):
    """Shared per-agent action-value head over stacked observation windows.

    Input rows are flat windows of the K most recent local observations with
    a one-hot agent id appended.  Output is one value per action; callers
    mask unavailable actions with MASK_SENTINEL before any argmax.
    """

    def masked_values(self, x: np.ndarray, avail: np.ndarray) -> np.ndarray:
        q = self.values(x)
        return np.where(avail, q, MASK_SENTINEL)


class PolicyNet(FeedForward):
    """Shared per-agent stochastic policy head (same input layout as utilities)."""

    def log_probs(self, x, avail: np.ndarray) -> Node:
        """Masked log-probabilities as graph nodes; avail is boolean (...,|A|)."""
        self._check_avail(avail)
        logits = self.forward(x)
        mask = ad.constant(np.where(avail, 0.0, LOGIT_MASK))
        return ad.log_softmax(ad.add(logits, mask))

    def probs_values(self, x: np.ndarray, avail: np.ndarray) -> np.ndarray:
        """Masked action distribution, plain numpy. Zero mass off-mask."""
        self._check_avail(avail)
        logits = np.where(avail, self.values(x), -np.inf)
        z = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        return p

    @staticmethod
    def _check_avail(avail: np.ndarray) -> None:
        if not np.asarray(avail).any(axis=-1).all():
            raise AvailabilityError("policy is degenerate: an agent has all actions masked")


# ---------------------------------------------------------------------------
# hypernetworks
# ---------------------------------------------------------------------------

class Hypernetwork:
    """Single affine layer mapping state to a pack of generated tensors.

    Each entry of `specs` is (key, shape, absolute) where absolute=True runs
    the generated tensor through |.| so it is elementwise non-negative for
    every state.  One fused affine produces all tensors; bias_init gives the
    constant the bias is initialized to per entry (broadcast over the tensor).
    """

    def __init__(self, name: str, rng: np.random.Generator, state_dim: int,
                 specs: list[tuple[str, tuple, bool]],
                 bias_init: dict[str, float] | None = None,
                 weight_scale: float | None = None):
        self.state_dim = state_dim
        self.specs = [(k, tuple(shape), bool(a)) for k, shape, a in specs]
        self.sizes = [int(np.prod(s)) for _, s, _ in self.specs]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        total = int(self.offsets[-1])
        s = weight_scale if weight_scale is not None else 1.0 / np.sqrt(state_dim)
        bias = np.zeros(total)
        for (key, _, _), lo, hi in zip(self.specs, self.offsets[:-1], self.offsets[1:]):
            bias[lo:hi] = (bias_init or {}).get(key, 0.0)
        self.params = ParameterSet(name)
        self.params.add("w", _uniform(rng, (total, state_dim), s))
        self.params.add("b", bias)

    def generate(self, state) -> dict[str, Node]:
        """Graph-node tensors keyed by spec name, each shaped (B, *shape)."""
        state = state if isinstance(state, Node) else ad.constant(state)
        flat = ad.affine(state, self.params["w"], self.params["b"])
        batch = state.value.shape[0]
        out: dict[str, Node] = {}
        for (key, shape, absolute), lo, hi in zip(
                self.specs, self.offsets[:-1], self.offsets[1:]):
            t = ad.slice_last(flat, int(lo), int(hi))
            if absolute:
                t = ad.absval(t)
            out[key] = ad.reshape(t, (batch,) + shape)
        return out

    def generate_values(self, state: np.ndarray) -> dict[str, np.ndarray]:
        state = np.asarray(state, dtype=np.float64)
        flat = state @ self.params["w"].value.T + self.params["b"].value
        batch = state.shape[0]
        out: dict[str, np.ndarray] = {}
        for (key, shape, absolute), lo, hi in zip(
                self.specs, self.offsets[:-1], self.offsets[1:]):
            t = flat[:, int(lo):int(hi)]
            if absolute:
                t = np.abs(t)
            out[key] = t.reshape((batch,) + shape)
        return out

    def set_constant(self, key: str, value: np.ndarray) -> None:
        """Zero the affine rows for one tensor and pin its bias (test helper)."""
        for (k, shape, _), lo, hi in zip(self.specs, self.offsets[:-1], self.offsets[1:]):
            if k == key:
                self.params["w"].value[int(lo):int(hi), :] = 0.0
                self.params["b"].value[int(lo):int(hi)] = np.asarray(
                    value, dtype=np.float64).reshape(-1)
                return
        raise KeyError(key)


# ---------------------------------------------------------------------------
# mixers
# ---------------------------------------------------------------------------

def _promote(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[:, None, :], True
    return x, False


class ConcaveMixer:
    """State-conditioned mixer, concave in the utility vector.

    Layer widths are `width` for the hidden activations; the output layer is
    scalar.  Inner weights are absolute-activated; the input weights are
    sign-free (negative-leaning at init, see module docstring).
    """

    def __init__(self, name: str, rng: np.random.Generator, n_agents: int,
                 state_dim: int, width: int = 32, init_gain: float = 0.3):
        self.n = n_agents
        self.width = width
        h = width
        specs = [
            ("w0", (h, n_agents), False),
            ("b0", (h,), False),
            ("w1", (h, h), True),
            ("b1", (h,), False),
            ("w2", (h, 2 * h), True),
            ("b2", (h,), False),
            ("w3", (1, 3 * h), True),
            ("b3", (1,), False),
        ]
        bias_init = {
            "w0": -init_gain / np.sqrt(n_agents),
            "w1": init_gain / np.sqrt(h),
            "w2": init_gain / np.sqrt(2 * h),
            "w3": init_gain / np.sqrt(3 * h),
        }
        self.hyper = Hypernetwork(name, rng, state_dim, specs, bias_init)
        self.params = self.hyper.params

    def forward(self, state, utilities) -> Node:
        """Q_tot node of shape (B,) from state (B,ds) and utilities (B,n)."""
        x = utilities if isinstance(utilities, Node) else ad.constant(utilities)
        if not np.isfinite(x.value).all():
            raise ValueError("concave mixer: non-finite utility inputs")
        g = self.hyper.generate(state)
        z1 = ad.add(ad.bmatvec(g["w0"], x), g["b0"])
        z2 = ad.relu(ad.add(ad.bmatvec(g["w1"], z1), g["b1"]))
        z3 = ad.relu(ad.add(ad.bmatvec(g["w2"], ad.concat([z1, z2])), g["b2"]))
        z4 = ad.add(ad.neg(ad.bmatvec(g["w3"], ad.concat([z1, z2, z3]))), g["b3"])
        return ad.reshape(z4, (x.value.shape[0],))

    def weights_values(self, state: np.ndarray) -> dict[str, np.ndarray]:
        return self.hyper.generate_values(state)

    @staticmethod
    def eval_values(g: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
        """Evaluate generated weights on utilities (B,n) or candidates (B,C,n)."""
        x, squeeze = _promote(x)
        z1 = np.einsum("boi,bci->bco", g["w0"], x) + g["b0"][:, None, :]
        z2 = np.einsum("boi,bci->bco", g["w1"], z1) + g["b1"][:, None, :]
        np.maximum(z2, 0.0, out=z2)
        z3 = (np.einsum("boi,bci->bco", g["w2"], np.concatenate([z1, z2], axis=-1))
              + g["b2"][:, None, :])
        np.maximum(z3, 0.0, out=z3)
        cat = np.concatenate([z1, z2, z3], axis=-1)
        z4 = -np.einsum("boi,bci->bco", g["w3"], cat) + g["b3"][:, None, :]
        out = z4[..., 0]
        return out[:, 0] if squeeze else out

    def values(self, state: np.ndarray, x: np.ndarray) -> np.ndarray:
        if not np.isfinite(np.asarray(x)).all():
            raise ValueError("concave mixer: non-finite utility inputs")
        return self.eval_values(self.weights_values(state), x)


class MonotonicMixer:
    """Four-layer mixer whose output is non-decreasing in every utility.

    All hypernet-generated weights are absolute-activated and the hidden
    activations are relu, so raising any single utility never lowers the
    output.  Used as the factorization ablation.
    """

    def __init__(self, name: str, rng: np.random.Generator, n_agents: int,
                 state_dim: int, width: int = 32, init_gain: float = 0.3):
        self.n = n_agents
        self.width = width
        h = width
        specs = [
            ("w0", (h, n_agents), True),
            ("b0", (h,), False),
            ("w1", (h, h), True),
            ("b1", (h,), False),
            ("w2", (h, h), True),
            ("b2", (h,), False),
            ("w3", (1, h), True),
            ("b3", (1,), False),
        ]
        bias_init = {
            "w0": init_gain / np.sqrt(n_agents),
            "w1": init_gain / np.sqrt(h),
            "w2": init_gain / np.sqrt(h),
            "w3": init_gain / np.sqrt(h),
        }
        self.hyper = Hypernetwork(name, rng, state_dim, specs, bias_init)
        self.params = self.hyper.params

    def forward(self, state, utilities) -> Node:
        x = utilities if isinstance(utilities, Node) else ad.constant(utilities)
        g = self.hyper.generate(state)
        m = ad.relu(ad.add(ad.bmatvec(g["w0"], x), g["b0"]))
        m = ad.relu(ad.add(ad.bmatvec(g["w1"], m), g["b1"]))
        m = ad.relu(ad.add(ad.bmatvec(g["w2"], m), g["b2"]))
        out = ad.add(ad.bmatvec(g["w3"], m), g["b3"])
        return ad.reshape(out, (x.value.shape[0],))

    def weights_values(self, state: np.ndarray) -> dict[str, np.ndarray]:
        return self.hyper.generate_values(state)

    @staticmethod
    def eval_values(g: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
        x, squeeze = _promote(x)
        m = np.einsum("boi,bci->bco", g["w0"], x) + g["b0"][:, None, :]
        np.maximum(m, 0.0, out=m)
        m = np.einsum("boi,bci->bco", g["w1"], m) + g["b1"][:, None, :]
        np.maximum(m, 0.0, out=m)
        m = np.einsum("boi,bci->bco", g["w2"], m) + g["b2"][:, None, :]
        np.maximum(m, 0.0, out=m)
        out = np.einsum("boi,bci->bco", g["w3"], m) + g["b3"][:, None, :]
        out = out[..., 0]
        return out[:, 0] if squeeze else out

    def values(self, state: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self.eval_values(self.weights_values(state), x)


class UnrestrictedMixer:
    """Feed-forward estimator over (state, chosen utilities); no constraints."""

    def __init__(self, name: str, rng: np.random.Generator, n_agents: int,
                 state_dim: int, hidden: list[int] | None = None):
        self.n = n_agents
        self.net = FeedForward(name, rng, state_dim + n_agents,
                               [64, 64] if hidden is None else hidden, 1)
        self.params = self.net.params

    def forward(self, state, utilities) -> Node:
        s = state if isinstance(state, Node) else ad.constant(state)
        x = utilities if isinstance(utilities, Node) else ad.constant(utilities)
        out = self.net.forward(ad.concat([s, x]))
        return ad.reshape(out, (s.value.shape[0],))

    def values(self, state: np.ndarray, x: np.ndarray) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:  # candidate axis: tile the state
            b, c, n = x.shape
            flat = np.concatenate(
                [np.repeat(state[:, None, :], c, axis=1), x], axis=-1)
            return self.net.values(flat.reshape(b * c, -1)).reshape(b, c)
        return self.net.values(np.concatenate([state, x], axis=-1))[:, 0]


class SoftCriticMixer:
    """One-layer soft critic: sum_i w_i(state) * input_i + b(state), w_i >= 0."""

    def __init__(self, name: str, rng: np.random.Generator, n_agents: int,
                 state_dim: int):
        self.n = n_agents
        specs = [("w", (n_agents,), True), ("b", (1,), False)]
        self.hyper = Hypernetwork(name, rng, state_dim, specs,
                                  bias_init={"w": 1.0},
                                  weight_scale=0.01 / np.sqrt(state_dim))
        self.params = self.hyper.params

    def forward(self, state, inputs) -> Node:
        x = inputs if isinstance(inputs, Node) else ad.constant(inputs)
        g = self.hyper.generate(state)
        s = ad.sum_axis(ad.mul(g["w"], x), axis=-1)
        return ad.add(s, ad.reshape(g["b"], (x.value.shape[0],)))

    def weights_values(self, state: np.ndarray) -> dict[str, np.ndarray]:
        return self.hyper.generate_values(state)

    def values(self, state: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        g = self.weights_values(state)
        return (g["w"] * inputs).sum(axis=-1) + g["b"][:, 0]
