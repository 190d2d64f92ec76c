"""One-Euro low-pass filter for noisy landmark tracks."""

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgument


def smoothing_factor(dt, cutoff):
    r = 2.0 * math.pi * cutoff * dt
    return r / (r + 1.0)


@dataclass
class OneEuroState:
    min_cutoff: float = 1.0
    beta: float = 0.007
    d_cutoff: float = 1.0
    x_prev: np.ndarray = None
    dx_prev: np.ndarray = None
    t_prev: float = None


def one_euro_filter(state, value, timestamp):
    """Filter one sample, updating ``state`` in place. Returns the estimate.

    The cutoff adapts per channel: ``min_cutoff + beta * |dx|`` where ``dx``
    is the low-passed derivative.
    """
    x = np.asarray(value, dtype=float)
    if state.t_prev is None:
        state.x_prev = x.copy()
        state.dx_prev = np.zeros_like(x)
        state.t_prev = float(timestamp)
        return x.copy()
    dt = float(timestamp) - state.t_prev
    if not dt > 0:
        raise InvalidArgument("timestamps must increase strictly")
    a_d = smoothing_factor(dt, state.d_cutoff)
    dx = (x - state.x_prev) / dt
    dx_hat = state.dx_prev + a_d * (dx - state.dx_prev)
    cutoff = state.min_cutoff + state.beta * np.abs(dx_hat)
    r = 2.0 * np.pi * cutoff * dt
    a = r / (r + 1.0)
    # incremental form: a constant signal is reproduced exactly
    x_hat = state.x_prev + a * (x - state.x_prev)
    state.x_prev = x_hat
    state.dx_prev = dx_hat
    state.t_prev = float(timestamp)
    return x_hat.copy()


def smooth_landmarks(frames, min_cutoff=1.0, beta=0.007, d_cutoff=1.0):
    """Return copies of ``frames`` with One-Euro filtered landmarks.

    Each landmark slot has its own filter; missing (NaN) samples pass
    through and leave that slot's filter untouched.
    """
    states = {}
    out = []
    for fr in frames:
        ld = fr.ldmk.copy()
        for k, row in enumerate(ld):
            if np.all(np.isfinite(row)):
                st = states.setdefault(k, OneEuroState(min_cutoff, beta, d_cutoff))
                ld[k] = one_euro_filter(st, row, fr.timestamp)
        out.append(fr.with_params(ldmk=ld))
    return out
