"""Recurrent control policy with outputs squashed into the control box.

A single Elman-style cell: h' = tanh(W_in x + W_rec h + b); the output
head maps h' through tanh onto the box interior, so control constraints
hold for every parameter setting. The same wiring runs on plain numpy
(fast rollouts) or on tape Values (training); both paths are covered by
agreement tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tape import ParamVector, affine, affine_tanh, tanh


@dataclass(frozen=True)
class ControlBox:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi) or not all(
            l < h for l, h in zip(self.lo, self.hi)
        ):
            raise ValueError(f"invalid control box {self.lo} .. {self.hi}")

    @property
    def dim(self) -> int:
        return len(self.lo)


@dataclass(frozen=True)
class PolicyShape:
    state_dim: int
    hidden: int
    control_dim: int


@dataclass
class PolicyParams:
    w_in: np.ndarray  # (H, state_dim)
    w_rec: np.ndarray  # (H, H)
    b_h: np.ndarray  # (H,)
    w_out: np.ndarray  # (m, H)
    b_out: np.ndarray  # (m,)

    @property
    def hidden(self) -> int:
        return self.w_rec.shape[0]

    def to_pv(self) -> ParamVector:
        return ParamVector(
            {
                "w_in": self.w_in,
                "w_rec": self.w_rec,
                "b_h": self.b_h,
                "w_out": self.w_out,
                "b_out": self.b_out,
            }
        )

    @classmethod
    def from_pv(cls, pv: ParamVector) -> "PolicyParams":
        return cls(**{k: v for k, v in pv.groups.items()})

    @classmethod
    def from_leaves(cls, leaves: dict) -> "PolicyParams":
        return cls(**{k: v for k, v in leaves.items()})


def init_policy(shape: PolicyShape, seed) -> PolicyParams:
    """Uniform weights in [-1/sqrt(fan_in), +1/sqrt(fan_in)], zero biases."""
    rng = np.random.default_rng(seed)
    n, h, m = shape.state_dim, shape.hidden, shape.control_dim

    def u(fan_in, size):
        a = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-a, a, size=size)

    return PolicyParams(
        w_in=u(n, (h, n)),
        w_rec=u(h, (h, h)),
        b_h=np.zeros(h),
        w_out=u(h, (m, h)),
        b_out=np.zeros(m),
    )


def zero_hidden(params: PolicyParams) -> np.ndarray:
    return np.zeros(params.hidden)


def _squash(y, lo: float, hi: float):
    # lo + (hi - lo) * (tanh(y) + 1) / 2, strictly inside the box
    half = 0.5 * (hi - lo)
    return tanh(y) * half + (lo + half)


def policy_step_np(params: PolicyParams, x: np.ndarray, h: np.ndarray, box: ControlBox):
    """One control step on numpy arrays; returns (u, h')."""
    h_new = np.tanh(params.w_in @ np.asarray(x, dtype=float) + params.w_rec @ h + params.b_h)
    y = params.w_out @ h_new + params.b_out
    lo = np.asarray(box.lo)
    hi = np.asarray(box.hi)
    half = 0.5 * (hi - lo)
    u = np.tanh(y) * half + (lo + half)
    return u, h_new


class PolicyCell:
    """Per-graph wiring of one parameter set for repeated steps.

    Built once per training step from float or Value parameter arrays;
    weight rows are pre-concatenated as [recurrent | input] so each hidden
    unit is a single fused node per step.
    """

    def __init__(self, params: PolicyParams, box: ControlBox):
        self.rows = [
            list(params.w_rec[i]) + list(params.w_in[i])
            for i in range(len(params.w_rec))
        ]
        self.b_h = list(params.b_h)
        self.w_out = [list(row) for row in params.w_out]
        self.b_out = list(params.b_out)
        self.box = box

    def step(self, x_row, h_list):
        """x_row and h_list hold floats or Values; returns (u_list, h')."""
        inp = list(h_list) + list(x_row)
        h_new = [affine_tanh(row, inp, b) for row, b in zip(self.rows, self.b_h)]
        u = []
        for k, (w, b) in enumerate(zip(self.w_out, self.b_out)):
            y = affine(w, h_new, b)
            u.append(_squash(y, self.box.lo[k], self.box.hi[k]))
        return u, h_new
