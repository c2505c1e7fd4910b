"""Residual policy and value networks: numpy MLPs with hand-written reverse mode."""
import logging
import math
from pathlib import Path

import numpy as np
from sklearn.preprocessing import StandardScaler

from errors import CorruptCheckpoint, DimensionMismatch, InvalidParams, NoForwardRecorded, VersionMismatch

logger = logging.getLogger(__name__)

MAGIC = b"ASRP"
VERSION = 2
KIND_POLICY = 1
KIND_VALUE = 2
ACTIVATION_CODES = {"tanh": 0, "identity": 1}
LOG_2PI = math.log(2.0 * math.pi)


def _act(name, z):
    return np.tanh(z) if name == "tanh" else z


def _act_grad(name, a):
    """Derivative of the activation, written in terms of its output."""
    return 1.0 - a * a if name == "tanh" else np.ones_like(a)


def orthogonal(shape, gain, rng):
    """Orthogonal matrix of the given (out, in) shape from the QR of a Gaussian draw."""
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class ObsNormalizer:
    """Running mean/std of observations, frozen at evaluation time."""

    def __init__(self, dim, clip=10.0):
        self.dim = dim
        self.clip = clip
        self.frozen = False
        self.scaler = StandardScaler()

    @property
    def fitted(self):
        return hasattr(self.scaler, "mean_")

    def update(self, batch):
        if self.frozen:
            return
        batch = np.atleast_2d(np.asarray(batch, dtype=float))
        if batch.shape[1] != self.dim:
            raise DimensionMismatch(f"normaliser expects {self.dim} columns, got {batch.shape[1]}")
        self.scaler.partial_fit(batch)

    def transform(self, x):
        if not self.fitted:
            return x
        return np.clip((x - self.scaler.mean_) / self.scaler.scale_, -self.clip, self.clip)

    def state(self):
        if not self.fitted:
            return np.concatenate([[0.0, float(self.frozen)], np.zeros(self.dim), np.ones(self.dim), np.ones(self.dim)])
        n = float(np.max(self.scaler.n_samples_seen_))
        return np.concatenate([[n, float(self.frozen)], self.scaler.mean_, self.scaler.var_, self.scaler.scale_])

    def load_state(self, flat):
        n, frozen = flat[0], flat[1]
        mean, var, scale = (flat[2 + k * self.dim:2 + (k + 1) * self.dim] for k in range(3))
        self.scaler = StandardScaler()
        if n > 0:
            self.scaler.n_samples_seen_ = int(n)
            self.scaler.mean_ = mean.copy()
            self.scaler.var_ = var.copy()
            # restored as fitted, never recomputed from var_
            self.scaler.scale_ = scale.copy()
        self.frozen = bool(frozen)


class Mlp:
    """Fully connected network; weights are (out, in), inputs are (batch, in) or (in,)."""

    kind = 0

    def __init__(self, layer_dims, activation="tanh", seed=0, normalizer=None):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or min(dims) < 1:
            raise InvalidParams(f"layer_dims must list at least two positive sizes, got {layer_dims!r}")
        if activation not in ACTIVATION_CODES:
            raise InvalidParams(f"unknown activation {activation!r}")
        self.layer_dims = dims
        self.activation = activation
        self.seed = seed
        self.normalizer = normalizer
        self._cache = None
        self.weights = [np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])]
        self.biases = [np.zeros(o) for o in dims[1:]]
        self.init_hidden(seed)

    def init_hidden(self, seed, last_gain=1.0):
        rng = np.random.default_rng(seed)
        for k, W in enumerate(self.weights):
            gain = math.sqrt(2.0) if k < len(self.weights) - 1 else last_gain
            W[...] = orthogonal(W.shape, gain, rng)
            self.biases[k][...] = 0.0

    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def _body(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.layer_dims[0]:
            raise DimensionMismatch(f"expected input of size {self.layer_dims[0]}, got {x.shape[1]}")
        if self.normalizer is not None:
            x = self.normalizer.transform(x)
        acts = [x]
        a = x
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W.T + b
            if k < last:
                a = _act(self.activation, z)
                acts.append(a)
            else:
                a = z
        self._cache = acts
        return a, single

    def forward(self, x):
        out, single = self._body(x)
        return out[0] if single else out

    def _backprop(self, grad_z):
        """Gradients of sum(grad_z * z_last) w.r.t. params, in params() order."""
        if self._cache is None:
            raise NoForwardRecorded("backward called before forward")
        acts = self._cache
        g = np.atleast_2d(np.asarray(grad_z, dtype=float))
        if g.shape != (acts[0].shape[0], self.layer_dims[-1]):
            raise DimensionMismatch(f"output gradient has shape {g.shape}")
        grads = [None] * (2 * len(self.weights))
        for k in range(len(self.weights) - 1, -1, -1):
            grads[2 * k] = g.T @ acts[k]
            grads[2 * k + 1] = g.sum(axis=0)
            if k:
                g = (g @ self.weights[k]) * _act_grad(self.activation, acts[k])
        return grads

    def backward(self, grad_out):
        return self._backprop(grad_out)

    def n_params(self):
        return sum(p.size for p in self.params())


class MlpPolicy(Mlp):
    """Gaussian policy whose mean is output_scale * tanh(last layer)."""

    kind = KIND_POLICY

    def __init__(self, layer_dims=(23, 64, 64, 3), output_scale=(0.1, 0.1, 0.2), sigma_frac=0.5,
                 activation="tanh", seed=0, normalizer=None):
        super().__init__(layer_dims, activation, seed, normalizer)
        self.output_scale = np.asarray(output_scale, dtype=float).reshape(self.layer_dims[-1])
        if np.any(self.output_scale <= 0):
            raise InvalidParams("output_scale entries must be > 0")
        self.log_std = np.zeros(self.layer_dims[-1])
        self.set_sigma(sigma_frac)
        self._squash = None
        init_zero_last_layer(self)

    def set_sigma(self, frac):
        if not frac > 0:
            raise InvalidParams(f"sigma fraction must be > 0, got {frac!r}")
        self.log_std = np.log(frac * self.output_scale)

    @property
    def std(self):
        return np.exp(self.log_std)

    def forward(self, x):
        z, single = self._body(x)
        t = np.tanh(z)
        self._squash = t
        mean = self.output_scale * t
        return mean[0] if single else mean

    def backward(self, grad_mean):
        if self._squash is None:
            raise NoForwardRecorded("backward called before forward")
        g = np.atleast_2d(np.asarray(grad_mean, dtype=float))
        return self._backprop(g * self.output_scale * (1.0 - self._squash ** 2))

    def sample(self, obs, rng, sigma_override=None):
        """Draw a ~ N(mean, diag(std^2)); returns (action, log_prob)."""
        mean = self.forward(obs)
        std = self.std if sigma_override is None else np.broadcast_to(np.asarray(sigma_override, float), mean.shape[-1:])
        action = mean + std * rng.standard_normal(mean.shape)
        return action, gaussian_log_prob(action, mean, np.log(std))


class ValueNet(Mlp):
    kind = KIND_VALUE

    def __init__(self, layer_dims=(23, 64, 64, 1), activation="tanh", seed=1, normalizer=None):
        if layer_dims[-1] != 1:
            raise InvalidParams("value network must have a single output")
        super().__init__(layer_dims, activation, seed, normalizer)

    def forward(self, x):
        out = super().forward(x)
        return out[..., 0]

    def backward(self, grad_out):
        return self._backprop(np.asarray(grad_out, dtype=float).reshape(-1, 1))


def gaussian_log_prob(action, mean, log_std):
    """Diagonal Gaussian log-density, summed over the last axis."""
    z = (np.asarray(action) - mean) / np.exp(log_std)
    return -np.sum(log_std) - 0.5 * np.sum(z * z, axis=-1) - 0.5 * mean.shape[-1] * LOG_2PI


def init_zero_last_layer(policy: Mlp, seed=None):
    """Orthogonal hidden layers (seeded); exact zeros on the output layer."""
    policy.init_hidden(policy.seed if seed is None else seed)
    policy.weights[-1][...] = 0.0
    policy.biases[-1][...] = 0.0


def sigma_schedule(progress, sigma0=0.5, sigma_final=0.05):
    """Linear decay of the exploration std (as a fraction of output_scale)."""
    p = min(max(float(progress), 0.0), 1.0)
    return sigma0 + (sigma_final - sigma0) * p


# ------------------------------------------------------------------ checkpoints

def save(net: Mlp, path):
    path = Path(path)
    dims = np.asarray(net.layer_dims, dtype="<u4")
    header = (MAGIC + np.array([VERSION], "<u4").tobytes()
              + np.array([net.kind, ACTIVATION_CODES[net.activation]], "<u1").tobytes()
              + np.array([dims.size], "<u4").tobytes() + dims.tobytes())
    payload = []
    if net.kind == KIND_POLICY:
        payload += [net.output_scale, net.log_std]
    norm = net.normalizer or ObsNormalizer(net.layer_dims[0])
    payload.append(np.concatenate([[1.0 if net.normalizer is not None else 0.0], norm.state()]))
    for W, b in zip(net.weights, net.biases):
        payload += [W.ravel(), b]
    body = np.concatenate(payload).astype("<f8").tobytes()
    path.write_bytes(header + body)
    logger.debug("saved %s network %s to %s", "policy" if net.kind == KIND_POLICY else "value", net.layer_dims, path)


def load(path) -> Mlp:
    data = Path(path).read_bytes()
    if len(data) < 14 or data[:4] != MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint file")
    version = int(np.frombuffer(data, "<u4", 1, 4)[0])
    if version != VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {VERSION}")
    kind, act_code = (int(v) for v in np.frombuffer(data, "<u1", 2, 8))
    n_dims = int(np.frombuffer(data, "<u4", 1, 10)[0])
    offset = 14 + 4 * n_dims
    if kind not in (KIND_POLICY, KIND_VALUE) or act_code not in ACTIVATION_CODES.values() or len(data) < offset:
        raise CorruptCheckpoint(f"{path}: bad header")
    dims = [int(d) for d in np.frombuffer(data, "<u4", n_dims, 14)]
    activation = {v: k for k, v in ACTIVATION_CODES.items()}[act_code]
    out_dim, in_dim = dims[-1], dims[0]
    n_layer = sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    n_head = 2 * out_dim if kind == KIND_POLICY else 0
    n_norm = 3 + 3 * in_dim
    if len(data) - offset != 8 * (n_head + n_norm + n_layer):
        raise CorruptCheckpoint(f"{path}: payload length does not match layer dims {dims}")
    flat = np.frombuffer(data, "<f8", offset=offset).astype(float)

    pos = 0
    if kind == KIND_POLICY:
        net = MlpPolicy(dims, flat[:out_dim], activation=activation)
        net.log_std = flat[out_dim:2 * out_dim].copy()
        pos = 2 * out_dim
    else:
        net = ValueNet(dims, activation=activation)
    norm_flat = flat[pos:pos + n_norm]
    pos += n_norm
    if norm_flat[0] > 0:
        net.normalizer = ObsNormalizer(in_dim)
        net.normalizer.load_state(norm_flat[1:])
    for W, b in zip(net.weights, net.biases):
        W[...] = flat[pos:pos + W.size].reshape(W.shape)
        pos += W.size
        b[...] = flat[pos:pos + b.size]
        pos += b.size
    if not np.all(np.isfinite(flat)):
        raise CorruptCheckpoint(f"{path}: non-finite parameters")
    return net
