"""Rigid-body algebra, chordal metrics, chi-square quantiles and bounding boxes.

Tangent vectors for SE(3) are ordered ``(v, w)``: three translational
components followed by three rotational components (axis-angle).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.special import gammainc, ndtri

_EPS = 1e-12


def skew(w: np.ndarray) -> np.ndarray:
    """Return the 3x3 cross-product matrix of ``w``."""
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def project_to_so3(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix to ``m`` in the Frobenius sense."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def so3_exp(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    k = skew(w)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * k @ k
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * k @ k


def so3_log(r: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(r).as_rotvec()


def _left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    k = skew(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * k + k @ k / 6.0
    a = (1.0 - math.cos(theta)) / theta**2
    b = (theta - math.sin(theta)) / theta**3
    return np.eye(3) + a * k + b * k @ k


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """An element of SE(3) stored as a rotation matrix and a translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(so3_exp(np.asarray(rotvec, dtype=float)), translation)

    @classmethod
    def from_quaternion(cls, xyzw, translation) -> "RigidTransform":
        """Build from a (possibly unnormalized) ``qx qy qz qw`` quaternion."""
        q = np.asarray(xyzw, dtype=float)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < _EPS:
            raise ValueError("quaternion has zero or non-finite norm")
        return cls(Rotation.from_quat(q / n).as_matrix(), translation)

    def quaternion(self) -> np.ndarray:
        q = Rotation.from_matrix(self.rotation).as_quat()
        # canonical sign keeps text serialization stable
        return -q if q[3] < 0 else q

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def renormalized(self) -> "RigidTransform":
        return RigidTransform(project_to_so3(self.rotation), self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )

    def __repr__(self) -> str:
        rv = np.round(so3_log(self.rotation), 6).tolist()
        return f"RigidTransform(rotvec={rv}, t={np.round(self.translation, 6).tolist()})"


@dataclass(frozen=True)
class EdgeWeight:
    """Isotropic chordal weights: ``rotation`` for the 3x3 block, ``translation`` for the column."""

    rotation: float = 1.0
    translation: float = 1.0

    def __post_init__(self):
        if self.rotation < 0 or self.translation < 0:
            raise ValueError("edge weights must be nonnegative")

    @classmethod
    def from_sigmas(cls, sigma_rot: float, sigma_trans: float, floor: float = 1e-3) -> "EdgeWeight":
        """Weights for isotropic noise; the chordal rotation residual is ~sqrt(2) x angle."""
        sr = max(float(sigma_rot), floor)
        st = max(float(sigma_trans), floor)
        return cls(1.0 / (2.0 * sr * sr), 1.0 / (st * st))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def relative(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a^-1 b``."""
    rt = a.rotation.T
    return RigidTransform(rt @ b.rotation, rt @ (b.translation - a.translation))


def weighted_frobenius_sq(a: RigidTransform, b: RigidTransform, w: EdgeWeight) -> float:
    """Squared weighted Frobenius distance ``tr((Ha-Hb) W (Ha-Hb)^T)``.

    ``W = diag(w.rotation * I3, w.translation)``; the homogeneous bottom row
    cancels, so only the rotation block and the translation column contribute.
    """
    dr = a.rotation - b.rotation
    dt = a.translation - b.translation
    return float(w.rotation * np.sum(dr * dr) + w.translation * np.dot(dt, dt))


def se3_exp(delta: np.ndarray) -> RigidTransform:
    delta = np.asarray(delta, dtype=float)
    v, w = delta[:3], delta[3:]
    return RigidTransform(so3_exp(w), _left_jacobian(w) @ v)


def se3_log(t: RigidTransform) -> np.ndarray:
    w = so3_log(t.rotation)
    v = np.linalg.solve(_left_jacobian(w), t.translation)
    return np.concatenate([v, w])


def exp_retract(t: RigidTransform, delta: np.ndarray) -> RigidTransform:
    """Right-multiply ``t`` by the exponential of a tangent increment ``(v, w)``."""
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (6,) or not np.all(np.isfinite(delta)):
        raise ValueError("delta must be a finite 6-vector")
    return compose(t, se3_exp(delta)).renormalized()


def _skew_batch(w: np.ndarray) -> np.ndarray:
    k = np.zeros(w.shape[:-1] + (3, 3))
    k[..., 0, 1], k[..., 0, 2] = -w[..., 2], w[..., 1]
    k[..., 1, 0], k[..., 1, 2] = w[..., 2], -w[..., 0]
    k[..., 2, 0], k[..., 2, 1] = -w[..., 1], w[..., 0]
    return k


def exp_retract_batch(rot: np.ndarray, trans: np.ndarray, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`exp_retract` over stacks ``rot (n,3,3)``, ``trans (n,3)``, ``delta (n,6)``."""
    delta = np.asarray(delta, dtype=float).reshape(-1, 6)
    v, w = delta[:, :3], delta[:, 3:]
    theta = np.linalg.norm(w, axis=1)
    small = theta < 1e-8
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(th) / th)
    b = np.where(small, 0.5, (1.0 - np.cos(th)) / th**2)
    c = np.where(small, 1.0 / 6.0, (th - np.sin(th)) / th**3)
    k = _skew_batch(w)
    kk = k @ k
    eye = np.eye(3)
    r_d = eye + a[:, None, None] * k + b[:, None, None] * kk
    jac = eye + b[:, None, None] * k + c[:, None, None] * kk
    t_d = np.einsum("nij,nj->ni", jac, v)
    new_r = rot @ r_d
    new_t = np.einsum("nij,nj->ni", rot, t_d) + trans
    u, _, vt = np.linalg.svd(new_r)
    d = np.sign(np.linalg.det(u @ vt))
    u[:, :, 2] *= d[:, None]
    return u @ vt, new_t


def chi2_quantile(dof: int, confidence: float) -> float:
    """Chi-square quantile for ``dof`` degrees of freedom.

    Starts from the Wilson-Hilferty approximation and refines by bisection on
    the regularized lower incomplete gamma function.
    """
    if not (isinstance(dof, (int, np.integer)) and 1 <= dof <= 12):
        raise ValueError(f"dof must be an integer in 1..12, got {dof!r}")
    if not (0.0 < confidence < 1.0):
        raise ValueError(f"confidence must lie in (0, 1), got {confidence!r}")
    k = float(dof)
    z = float(ndtri(confidence))
    guess = k * (1.0 - 2.0 / (9.0 * k) + z * math.sqrt(2.0 / (9.0 * k))) ** 3
    guess = max(guess, 1e-12)

    def cdf(x):
        return gammainc(k / 2.0, x / 2.0)

    lo, hi = guess, guess
    while cdf(lo) > confidence:
        lo *= 0.5
    while cdf(hi) < confidence:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < confidence:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True, eq=False)
class Aabb:
    """Axis-aligned bounding box."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.array(self.min_corner, dtype=float).reshape(3)
        hi = np.array(self.max_corner, dtype=float).reshape(3)
        if np.any(lo > hi):
            raise ValueError("min_corner must not exceed max_corner")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @classmethod
    def from_points(cls, points) -> "Aabb":
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(p) == 0:
            raise ValueError("cannot bound an empty point set")
        return cls(p.min(axis=0), p.max(axis=0))

    @classmethod
    def union_of(cls, boxes: Iterable["Aabb"]) -> "Aabb":
        boxes = list(boxes)
        if not boxes:
            raise ValueError("cannot take the union of no boxes")
        lo = np.min([b.min_corner for b in boxes], axis=0)
        hi = np.max([b.max_corner for b in boxes], axis=0)
        return cls(lo, hi)

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min_corner, other.min_corner), np.maximum(self.max_corner, other.max_corner))

    def contains(self, other: "Aabb", tol: float = 1e-9) -> bool:
        return bool(
            np.all(other.min_corner >= self.min_corner - tol) and np.all(other.max_corner <= self.max_corner + tol)
        )

    def contains_point(self, p, tol: float = 1e-9) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.min_corner - tol) and np.all(p <= self.max_corner + tol))

    def intersects(self, other: "Aabb") -> bool:
        return bool(np.all(self.min_corner <= other.max_corner) and np.all(other.min_corner <= self.max_corner))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_corner + self.max_corner)

    def __eq__(self, other):
        if not isinstance(other, Aabb):
            return NotImplemented
        return bool(np.array_equal(self.min_corner, other.min_corner) and np.array_equal(self.max_corner, other.max_corner))

    def __hash__(self):
        return hash((tuple(self.min_corner), tuple(self.max_corner)))

    def to_list(self) -> list:
        return [self.min_corner.tolist(), self.max_corner.tolist()]
