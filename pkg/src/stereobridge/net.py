"""Conditional denoiser MLP with hand-written reverse-mode gradients.

The network maps ``(x_t, t, cond)`` to a raw output of the data dimension.
Inputs are concatenated as ``[x_t, time_embedding(t), cond]`` and passed
through SiLU hidden layers; the final layer is linear and zero-initialized
by default so a fresh network outputs exactly zero.

Gradients are computed by explicit backpropagation in float64, which keeps
every parameter checkable against central finite differences and makes
training bitwise deterministic for a fixed seed.  Checkpoints use a small
versioned binary container of named little-endian float64 arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np


class TrainingError(RuntimeError):
    """Raised when a training step produces a non-finite loss or gradient."""


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class DenoiserParams:
    """MLP weights plus the fixed embedding/conditioning dimensions.

    ``weights[i]`` has shape (fan_in, fan_out); activations multiply on the
    left.  The input layer accepts ``data_dim + time_embed_dim + cond_dim``
    features and the output layer emits ``data_dim`` features.
    """

    weights: list
    biases: list
    data_dim: int
    time_embed_dim: int
    cond_dim: int

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            data_dim=self.data_dim,
            time_embed_dim=self.time_embed_dim,
            cond_dim=self.cond_dim,
        )


@dataclass
class EmaParams:
    """Exponential moving average of the online parameters.

    Shape-identical to :class:`DenoiserParams`; only ever written by
    :func:`ema_update`, never by the optimizer.
    """

    weights: list
    biases: list
    data_dim: int
    time_embed_dim: int
    cond_dim: int
    decay: float = 0.999

    @property
    def n_layers(self) -> int:
        return len(self.weights)


@dataclass
class ParamGrads:
    """Gradient arrays, shape-matched to the parameter lists."""

    weights: list
    biases: list


@dataclass
class AdamState:
    """Adam moment accumulators and hyperparameters."""

    m_weights: list
    v_weights: list
    m_biases: list
    v_biases: list
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_denoiser(
    rng: np.random.Generator,
    data_dim: int,
    cond_dim: int,
    hidden: int = 128,
    depth: int = 4,
    time_embed_dim: int = 32,
    zero_final: bool = True,
) -> DenoiserParams:
    """He-normal hidden layers; zero final layer unless disabled.

    ``depth`` counts hidden layers, so the network has ``depth + 1`` weight
    matrices in total.
    """
    if time_embed_dim % 2 != 0:
        raise ValueError("time_embed_dim must be even")
    in_dim = data_dim + time_embed_dim + cond_dim
    dims = [in_dim] + [hidden] * depth + [data_dim]
    weights, biases = [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        last = i == len(dims) - 2
        if last and zero_final:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return DenoiserParams(
        weights=weights,
        biases=biases,
        data_dim=data_dim,
        time_embed_dim=time_embed_dim,
        cond_dim=cond_dim,
    )


def ema_from(params: DenoiserParams, decay: float = 0.999) -> EmaParams:
    """Start the target network as an exact copy of the online one."""
    return EmaParams(
        weights=[w.copy() for w in params.weights],
        biases=[b.copy() for b in params.biases],
        data_dim=params.data_dim,
        time_embed_dim=params.time_embed_dim,
        cond_dim=params.cond_dim,
        decay=decay,
    )


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of times in [0, 1].

    Frequencies are geometric between 1 and 1000 cycles over the unit
    interval; returns shape (..., dim).
    """
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    angles = 2.0 * np.pi * t[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def _assemble_input(p: DenoiserParams, x_t, t, cond) -> np.ndarray:
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    if x_t.shape[1] != p.data_dim:
        raise ValueError(f"state dim {x_t.shape[1]} != data_dim {p.data_dim}")
    if cond.shape[1] != p.cond_dim:
        raise ValueError(f"cond dim {cond.shape[1]} != cond_dim {p.cond_dim}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(x_t.shape[0], float(t))
    if cond.shape[0] == 1 and x_t.shape[0] > 1:
        cond = np.broadcast_to(cond, (x_t.shape[0], cond.shape[1]))
    emb = time_embedding(t, p.time_embed_dim)
    return np.concatenate([x_t, emb, cond], axis=1)


def forward_with_cache(p: DenoiserParams, x_t, t, cond):
    """Run the network and keep pre-activations for backprop.

    Returns ``(output, cache)`` where output has shape (batch, data_dim).
    """
    a = _assemble_input(p, x_t, t, cond)
    pre_acts = []
    acts = [a]
    for i in range(p.n_layers):
        z = a @ p.weights[i] + p.biases[i]
        pre_acts.append(z)
        if i < p.n_layers - 1:
            a = _silu(z)
            acts.append(a)
        else:
            a = z
    return a, (acts, pre_acts)


def forward(p: DenoiserParams, x_t, t, cond) -> np.ndarray:
    """Raw network output; a single input vector yields a 1-D result."""
    single = np.asarray(x_t).ndim == 1
    out, _ = forward_with_cache(p, x_t, t, cond)
    return out[0] if single else out


def backward(p: DenoiserParams, cache, d_out: np.ndarray) -> ParamGrads:
    """Backpropagate ``d_out = dL/d(output)`` to parameter gradients."""
    acts, pre_acts = cache
    d_weights = [None] * p.n_layers
    d_biases = [None] * p.n_layers
    delta = np.asarray(d_out, dtype=np.float64)
    for i in range(p.n_layers - 1, -1, -1):
        d_weights[i] = acts[i].T @ delta
        d_biases[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ p.weights[i].T) * _silu_grad(pre_acts[i - 1])
    return ParamGrads(weights=d_weights, biases=d_biases)


def loss_and_grads(p: DenoiserParams, batch, loss_fn):
    """Scalar loss and parameter gradients for a batch.

    ``batch`` is a ``(x_t, t, cond)`` triple of arrays and ``loss_fn`` maps
    the network outputs (batch, data_dim) to ``(loss, dL/d_outputs)``.  The
    split keeps the differentiation generic: any smooth output-space loss
    can be checked against finite differences.
    """
    x_t, t, cond = batch
    out, cache = forward_with_cache(p, x_t, t, cond)
    loss, d_out = loss_fn(out)
    if not np.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {loss!r} on batch of {out.shape[0]} "
            f"(|x| max {np.max(np.abs(np.asarray(x_t))):.3g})"
        )
    return float(loss), backward(p, cache, d_out)


# ---------------------------------------------------------------------------
# Optimizer and EMA
# ---------------------------------------------------------------------------

def init_adam(p: DenoiserParams, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        m_weights=[np.zeros_like(w) for w in p.weights],
        v_weights=[np.zeros_like(w) for w in p.weights],
        m_biases=[np.zeros_like(b) for b in p.biases],
        v_biases=[np.zeros_like(b) for b in p.biases],
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def _adam_tensor(m, v, g, state, t):
    m = state.beta1 * m + (1.0 - state.beta1) * g
    v = state.beta2 * v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    delta = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return m, v, delta


def adam_step(state: AdamState, p: DenoiserParams, grads: ParamGrads):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if len(grads.weights) != p.n_layers:
        raise ValueError("gradient layer count does not match parameters")
    t = state.step + 1
    new_w, new_b = [], []
    m_w, v_w, m_b, v_b = [], [], [], []
    for i in range(p.n_layers):
        if grads.weights[i].shape != p.weights[i].shape:
            raise ValueError(f"gradient shape mismatch at layer {i}")
        m, v, delta = _adam_tensor(state.m_weights[i], state.v_weights[i],
                                   grads.weights[i], state, t)
        m_w.append(m)
        v_w.append(v)
        new_w.append(p.weights[i] - delta)
        m, v, delta = _adam_tensor(state.m_biases[i], state.v_biases[i],
                                   grads.biases[i], state, t)
        m_b.append(m)
        v_b.append(v)
        new_b.append(p.biases[i] - delta)
    new_params = replace(p, weights=new_w, biases=new_b)
    new_state = replace(state, m_weights=m_w, v_weights=v_w,
                        m_biases=m_b, v_biases=v_b, step=t)
    return new_params, new_state


def ema_update(target: EmaParams, online: DenoiserParams) -> EmaParams:
    """theta_bar <- decay * theta_bar + (1 - decay) * theta, elementwise."""
    mu = target.decay
    if len(target.weights) != online.n_layers:
        raise ValueError("EMA layer count does not match online parameters")
    new_w = [mu * tw + (1.0 - mu) * ow for tw, ow in zip(target.weights, online.weights)]
    new_b = [mu * tb + (1.0 - mu) * ob for tb, ob in zip(target.biases, online.biases)]
    return replace(target, weights=new_w, biases=new_b)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"SBDENOIS"
_VERSION = 1


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    name_b = name.encode("ascii")
    head = struct.pack("<I", len(name_b)) + name_b
    head += struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + arr.tobytes()


def _unpack_array(buf: bytes, offset: int):
    (name_len,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    name = buf[offset:offset + name_len].decode("ascii")
    offset += name_len
    (ndim,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    shape = struct.unpack_from(f"<{ndim}Q", buf, offset) if ndim else ()
    offset += 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape)
    offset += 8 * count
    return name, arr.astype(np.float64), offset


def save_checkpoint(path, online: DenoiserParams, target: EmaParams) -> None:
    """Write both parameter sets to a flat versioned binary container."""
    arrays = [
        ("meta.dims", np.array([online.data_dim, online.time_embed_dim,
                                online.cond_dim, online.n_layers], dtype=np.float64)),
        ("meta.ema_decay", np.array(target.decay, dtype=np.float64)),
    ]
    for i in range(online.n_layers):
        arrays.append((f"online.w{i}", online.weights[i]))
        arrays.append((f"online.b{i}", online.biases[i]))
    for i in range(target.n_layers):
        arrays.append((f"ema.w{i}", target.weights[i]))
        arrays.append((f"ema.b{i}", target.biases[i]))
    blob = _MAGIC + struct.pack("<II", _VERSION, len(arrays))
    for name, arr in arrays:
        blob += _pack_array(name, arr)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path):
    """Read a container written by :func:`save_checkpoint`.

    Returns ``(online, target)``; round-trips bitwise with the writer.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != _MAGIC:
        raise ValueError(f"bad checkpoint magic {buf[:8]!r}")
    version, n_arrays = struct.unpack_from("<II", buf, 8)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 16
    named = {}
    for _ in range(n_arrays):
        name, arr, offset = _unpack_array(buf, offset)
        named[name] = arr
    dims = named["meta.dims"].astype(int)
    data_dim, time_embed_dim, cond_dim, n_layers = (int(v) for v in dims)
    online = DenoiserParams(
        weights=[named[f"online.w{i}"].copy() for i in range(n_layers)],
        biases=[named[f"online.b{i}"].copy() for i in range(n_layers)],
        data_dim=data_dim,
        time_embed_dim=time_embed_dim,
        cond_dim=cond_dim,
    )
    target = EmaParams(
        weights=[named[f"ema.w{i}"].copy() for i in range(n_layers)],
        biases=[named[f"ema.b{i}"].copy() for i in range(n_layers)],
        data_dim=data_dim,
        time_embed_dim=time_embed_dim,
        cond_dim=cond_dim,
        decay=float(named["meta.ema_decay"].reshape(-1)[0]),
    )
    return online, target
