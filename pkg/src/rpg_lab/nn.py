"""Dense MLP with hand-written forward/backward passes, Adam, and seeded RNG streams.

Parameters are stored per layer as ``W`` of shape ``(out, in)`` and ``b`` of
shape ``(out,)``. The flat view is layer-major, weights before biases, with
row-major weight matrices.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when an operation is called with inputs violating its contract."""


@dataclass(frozen=True)
class MlpParams:
    sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ContractError(f"invalid layer sizes {self.sizes}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[i + 1], self.sizes[i]) or b.shape != (self.sizes[i + 1],):
                raise ContractError(f"layer {i} has shapes {w.shape}, {b.shape} for sizes {self.sizes}")

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    @property
    def n_params(self) -> int:
        return param_count(self.sizes)

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def unflatten(cls, sizes: Sequence[int], flat: np.ndarray) -> "MlpParams":
        sizes = tuple(int(s) for s in sizes)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (param_count(sizes),):
            raise ContractError(f"flat vector has shape {flat.shape}, expected ({param_count(sizes)},)")
        weights, biases = [], []
        k = 0
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            weights.append(flat[k:k + n_in * n_out].reshape(n_out, n_in).copy())
            k += n_in * n_out
            biases.append(flat[k:k + n_out].copy())
            k += n_out
        return cls(sizes, tuple(weights), tuple(biases))

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator) -> "MlpParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        sizes = tuple(int(s) for s in sizes)
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(n_in)
            weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
            biases.append(rng.uniform(-bound, bound, size=n_out))
        return cls(sizes, tuple(weights), tuple(biases))

    @classmethod
    def zeros(cls, sizes: Sequence[int]) -> "MlpParams":
        return cls.unflatten(sizes, np.zeros(param_count(sizes)))


def param_count(sizes: Sequence[int]) -> int:
    return sum(n_in * n_out + n_out for n_in, n_out in zip(sizes[:-1], sizes[1:]))


@dataclass(frozen=True)
class Tape:
    """Activation record of a forward pass.

    ``acts[l]`` is the input to layer ``l`` (``acts[0]`` is the network input,
    later entries are tanh outputs).
    """
    params: MlpParams
    acts: tuple[np.ndarray, ...]
    batched: bool


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Evaluate the network on ``x`` of shape ``(n_in,)`` or ``(B, n_in)``."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    if x.ndim not in (1, 2) or x.shape[-1] != params.n_in:
        raise ContractError(f"input shape {x.shape} does not match first layer size {params.n_in}")
    a = x
    acts = []
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        acts.append(a)
        z = a @ w.T + b
        a = np.tanh(z) if i < n_layers - 1 else z
    return a, Tape(params, tuple(acts), batched)


def mlp_backward(tape: Tape, cotangent: np.ndarray, *, per_sample: bool = False,
                 params: MlpParams | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian products of ``cotangent . output``.

    Returns ``(param_grad, input_grad)``. For a batched tape the parameter
    gradient is summed over the batch unless ``per_sample`` is set, in which
    case it has shape ``(B, n_params)``.
    """
    if params is not None and params is not tape.params:
        raise ContractError("tape was recorded with different parameters")
    p = tape.params
    if len(tape.acts) != len(p.weights):
        raise ContractError("tape does not match parameter layer count")
    delta = np.asarray(cotangent, dtype=np.float64)
    if not tape.batched:
        if delta.shape != (p.n_out,):
            raise ContractError(f"cotangent shape {delta.shape} != ({p.n_out},)")
        delta = delta[None, :]
        acts = [a[None, :] for a in tape.acts]
    else:
        if delta.shape != (tape.acts[0].shape[0], p.n_out):
            raise ContractError(f"cotangent shape {delta.shape} != ({tape.acts[0].shape[0]}, {p.n_out})")
        acts = list(tape.acts)
    batch = delta.shape[0]

    grads_w: list[np.ndarray] = [None] * len(p.weights)  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * len(p.weights)  # type: ignore[list-item]
    for i in range(len(p.weights) - 1, -1, -1):
        a = acts[i]
        if per_sample:
            grads_w[i] = (delta[:, :, None] * a[:, None, :]).reshape(batch, -1)
            grads_b[i] = delta
        else:
            grads_w[i] = (delta.T @ a).ravel()
            grads_b[i] = delta.sum(axis=0)
        da = delta @ p.weights[i]
        if i > 0:
            delta = da * (1.0 - a * a)
    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw)
        parts.append(gb)
    param_grad = np.concatenate(parts, axis=-1)
    input_grad = da
    if not tape.batched:
        input_grad = input_grad[0]
        if per_sample:
            param_grad = param_grad[0]
    return param_grad, input_grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-2, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def adam_step(state: AdamState, params, grad: np.ndarray, lr: float | None = None):
    """One bias-corrected Adam descent step on ``params`` (MlpParams or flat array).

    Returns ``(new_params, new_state)``; the inputs are not modified.
    """
    grad = np.asarray(grad, dtype=np.float64)
    flat = params.flat() if isinstance(params, MlpParams) else np.asarray(params, dtype=np.float64)
    if grad.shape != flat.shape or grad.shape != state.m.shape:
        raise ContractError(f"gradient shape {grad.shape} does not match parameters {flat.shape}")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient passed to adam_step")
    lr = state.lr if lr is None else lr
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_flat = flat - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = replace(state, m=m, v=v, t=t)
    if isinstance(params, MlpParams):
        return MlpParams.unflatten(params.sizes, new_flat), new_state
    return new_flat, new_state


def rng_fork(seed: int, label: str) -> np.random.Generator:
    """Independent, reproducible generator for a (seed, label) pair.

    The label is hashed with CRC32 (stable across processes, unlike ``hash``)
    and used as the spawn key of a PCG64 seed sequence.
    """
    key = zlib.crc32(label.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(key,))
    return np.random.Generator(np.random.PCG64(ss))

