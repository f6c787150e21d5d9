"""Keyframe IMU state and its 15-dim error-state retraction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import quat_boxminus, quat_boxplus, quat_identity, quat_normalize, quat_to_rot

# error-state layout: [δp, δv, δθ, δb_a, δb_g]
P, V, TH, BA, BG = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)
ERROR_DIM = 15


@dataclass
class KeyframeState:
    """IMU state at a keyframe: global position, velocity, body-to-global
    orientation and the two sensor biases."""

    t_ns: int
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=quat_identity)
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.t_ns = int(self.t_ns)
        self.p = np.asarray(self.p, dtype=float).copy()
        self.v = np.asarray(self.v, dtype=float).copy()
        self.q = quat_normalize(self.q)
        self.ba = np.asarray(self.ba, dtype=float).copy()
        self.bg = np.asarray(self.bg, dtype=float).copy()

    @property
    def R(self):
        return quat_to_rot(self.q)

    def copy(self) -> "KeyframeState":
        return KeyframeState(self.t_ns, self.p, self.v, self.q, self.ba, self.bg)

    def boxplus(self, dx) -> "KeyframeState":
        dx = np.asarray(dx, dtype=float)
        return KeyframeState(self.t_ns, self.p + dx[P], self.v + dx[V],
                             quat_boxplus(self.q, dx[TH]),
                             self.ba + dx[BA], self.bg + dx[BG])

    def boxminus(self, other: "KeyframeState"):
        """Error-state vector ``dx`` with ``other.boxplus(dx) == self``."""
        return np.concatenate([self.p - other.p, self.v - other.v,
                               quat_boxminus(self.q, other.q),
                               self.ba - other.ba, self.bg - other.bg])

    def to_vector(self):
        """16 parameters: p, v, q (wxyz), ba, bg."""
        return np.concatenate([self.p, self.v, self.q, self.ba, self.bg])
