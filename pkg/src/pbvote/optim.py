"""Adam with bias correction, kept functional: state in, state out."""

from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.m.shape != self.v.shape:
            raise ShapeError("moment arrays must share a shape")
        if self.t < 0:
            raise ShapeError("step counter must be non-negative")


def init_adam(n: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, w: np.ndarray, g: np.ndarray):
    """One minimization step. Returns (new_state, new_w); inputs untouched."""
    if w.shape != state.m.shape or g.shape != state.m.shape:
        raise ShapeError("weights/gradient shape mismatch with optimizer state")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    w_new = w - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, t=t), w_new


def adam_to_dict(state: AdamState) -> dict:
    return {
        "m": state.m.tolist(), "v": state.v.tolist(), "t": state.t,
        "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
    }


def adam_from_dict(d: dict) -> AdamState:
    return AdamState(np.asarray(d["m"], dtype=np.float64),
                     np.asarray(d["v"], dtype=np.float64),
                     int(d["t"]), float(d["lr"]),
                     float(d["beta1"]), float(d["beta2"]), float(d["eps"]))
