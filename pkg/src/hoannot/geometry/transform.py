from dataclasses import dataclass

import numpy as np

from ..errors import InvariantViolation
from .rotations import matrix_to_rotvec, rotvec_to_matrix

ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> R @ x + t. Translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvariantViolation("non-finite rigid transform")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise InvariantViolation("rotation is not in SO(3)")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)):
        return cls(rotvec_to_matrix(rotvec), translation)

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    def as_matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def rotvec(self):
        return matrix_to_rotvec(self.rotation)

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other):
        """self after other: x -> self(other(x))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def to_dict(self):
        return {"R": self.rotation.tolist(), "t": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["R"], dtype=float), np.asarray(d["t"], dtype=float))

    def __repr__(self):
        return f"RigidTransform(rotvec={np.round(self.rotvec(), 6).tolist()}, t={np.round(self.translation, 6).tolist()})"
