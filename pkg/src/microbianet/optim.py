"""Adam optimizer, Kaiming initialization and seeded RNG construction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError


def make_rng(seed, stream=None):
    """Deterministic PCG64 generator; identical seed gives an identical stream.

    ``stream`` derives an independent child stream from the same seed (used
    to give e.g. each feature-visualization run its own reproducible noise).
    """
    seq = np.random.SeedSequence(int(seed))
    if stream is not None:
        seq = np.random.SeedSequence(int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(seq))


def kaiming_init(shape, fan_in, rng, dtype=np.float32):
    """Normal samples with std sqrt(2 / fan_in)."""
    if fan_in <= 0:
        raise ParameterError(f"fan_in must be positive, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


@dataclass
class AdamState:
    """Adaptive moment estimation state for a named parameter set.

    Weight decay defaults to the coupled convention (added to the gradient
    before the moment updates); set ``decoupled=True`` to apply it directly
    to the parameters instead.
    """

    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = False
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ParameterError("Adam betas must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ParameterError("learning rate must be positive")


def adam_step(state, params, grads):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``params`` and ``grads`` are dicts of name -> array with matching shapes.
    Moment buffers are created lazily on first use.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
        if state.weight_decay and state.decoupled:
            update = update + state.weight_decay * p
        p -= (state.learning_rate * update).astype(p.dtype, copy=False)
    return params
