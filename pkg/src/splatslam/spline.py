"""Continuous-time trajectory: cubic B-spline on SO(3) x R^3.

The trajectory stores unit-quaternion rotation control points and R^3
translation control points over a shared, strictly increasing knot vector.
Translation uses the ordinary B-spline form

    p(t) = sum_j N_j(t) p_j,

rotation the cumulative form

    R(t) = R_c Exp(Bt_1(t) d_1) Exp(Bt_2(t) d_2) Exp(Bt_3(t) d_3),
    d_j = Log(R_{c+j-1}^T R_{c+j}),    c = first active control index,

where Bt_j are the cumulative basis functions (suffix sums of N_j).

Knot convention (textbook / scipy): ``len(knots) == len(ctrl) + 4`` and the
spline is fully defined for ``t`` in ``[knots[3], knots[-4])``; queries at
exactly ``knots[-4]`` are evaluated as the left limit, which equals the value
by C^2 continuity.  Basis polynomials per segment are derived from knot
differences with the Cox-de Boor recursion carried out on polynomial
coefficients in the local variable ``x = t - knots[i]``, which keeps them
well conditioned for arbitrarily long time spans.

Control-point perturbations are right-multiplicative for rotations
(``R_n <- R_n Exp(eps)``) and additive for translations; all Jacobians
returned here follow that convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .geometry import (
    exp_so3,
    hat,
    jl_inv_so3,
    jr_inv_so3,
    jr_so3,
    mat_to_quat,
    quat_conj,
    quat_mul,
    quat_normalize,
    quat_to_mat,
    quat_to_rotvec,
)

DEGREE = 3


def _poly_mul_linear(p: np.ndarray, a: float, b: float) -> np.ndarray:
    """Multiply a cubic-capped coefficient vector by the linear factor (a + b x)."""
    out = a * p
    out[1:] += b * p[:-1]
    return out


def segment_blending(knots: np.ndarray, i: int) -> np.ndarray:
    """Polynomial blending matrix for segment ``[knots[i], knots[i+1])``.

    Returns a (4, 4) array whose row ``j`` holds the coefficients (constant
    first, powers of ``x = t - knots[i]``) of basis function ``N_{i-3+j}``
    restricted to the segment.  Rows sum to the constant polynomial 1
    (partition of unity).
    """
    polys: dict[tuple[int, int], np.ndarray] = {(i, 0): np.array([1.0, 0.0, 0.0, 0.0])}
    x0 = knots[i]
    for k in range(1, DEGREE + 1):
        for j in range(i - k, i + 1):
            acc = np.zeros(4)
            left = polys.get((j, k - 1))
            if left is not None:
                den = knots[j + k] - knots[j]
                acc += _poly_mul_linear(left, (x0 - knots[j]) / den, 1.0 / den)
            right = polys.get((j + 1, k - 1))
            if right is not None:
                den = knots[j + k + 1] - knots[j + 1]
                acc += _poly_mul_linear(right, (knots[j + k + 1] - x0) / den, -1.0 / den)
            polys[(j, k)] = acc
    return np.stack([polys[(i - 3 + r, DEGREE)] for r in range(4)])


def _eval_rows(coeffs: np.ndarray, x: np.ndarray, order: int = 0) -> np.ndarray:
    """Evaluate (batched) blending rows or their time derivatives.

    coeffs: (N, 4, 4), x: (N,) local offsets.  Returns (N, 4) basis values.
    """
    c = coeffs
    for _ in range(order):
        c = c[..., 1:] * np.arange(1, c.shape[-1])
    powers = x[:, None] ** np.arange(c.shape[-1])
    return np.einsum("nrk,nk->nr", c, powers)


@dataclass
class Trajectory:
    """Cubic spline trajectory with append-only extension.

    Queries are safe to run concurrently; :meth:`extend` mutates internal
    arrays and requires exclusive access.
    """

    knots: np.ndarray
    rot_ctrl: np.ndarray  # (n, 4) unit quaternions, hemisphere aligned
    trans_ctrl: np.ndarray  # (n, 3)
    _coeffs: np.ndarray = field(init=False, repr=False)
    _rot_mats: np.ndarray = field(init=False, repr=False)
    _rel: np.ndarray = field(init=False, repr=False)  # (n-1, 3) Log(q_k^-1 q_{k+1})

    def __post_init__(self) -> None:
        self.knots = np.ascontiguousarray(self.knots, dtype=np.float64)
        if self.knots.ndim != 1 or np.any(np.diff(self.knots) <= 0):
            raise ValueError("knots must be 1-D and strictly increasing")
        self.rot_ctrl = np.asarray(self.rot_ctrl, dtype=np.float64).copy()
        self.trans_ctrl = np.asarray(self.trans_ctrl, dtype=np.float64).copy()
        n = len(self.knots) - DEGREE - 1
        if len(self.rot_ctrl) != n or len(self.trans_ctrl) != n:
            raise ValueError(
                f"need len(knots) == len(ctrl) + {DEGREE + 1}; "
                f"got {len(self.knots)} knots, {len(self.rot_ctrl)} ctrl"
            )
        self.rot_ctrl = quat_normalize(self.rot_ctrl)
        for k in range(1, n):
            if float(self.rot_ctrl[k - 1] @ self.rot_ctrl[k]) < 0.0:
                self.rot_ctrl[k] = -self.rot_ctrl[k]
        self._rebuild_caches()

    # -- cache maintenance -------------------------------------------------

    def _rebuild_caches(self) -> None:
        m = len(self.knots) - 1
        coeffs = np.zeros((m, 4, 4))
        for i in range(DEGREE, m - DEGREE):
            coeffs[i] = segment_blending(self.knots, i)
        self._coeffs = coeffs
        self._rot_mats = quat_to_mat(self.rot_ctrl)
        self._rel = quat_to_rotvec(quat_mul(quat_conj(self.rot_ctrl[:-1]), self.rot_ctrl[1:]))

    # -- domain ------------------------------------------------------------

    @property
    def t_start(self) -> float:
        return float(self.knots[DEGREE])

    @property
    def t_end(self) -> float:
        return float(self.knots[-DEGREE - 1])

    def _segments(self, ts: np.ndarray) -> np.ndarray:
        ts = np.asarray(ts, dtype=np.float64)
        if ts.ndim != 1:
            raise ValueError("query times must be a 1-D array")
        if ts.size and (ts.min() < self.t_start or ts.max() > self.t_end):
            raise DomainError(
                f"query times outside [{self.t_start}, {self.t_end}]: "
                f"[{ts.min()}, {ts.max()}]"
            )
        idx = np.searchsorted(self.knots, ts, side="right") - 1
        return np.clip(idx, DEGREE, len(self.knots) - DEGREE - 2)

    # -- queries -----------------------------------------------------------

    def _basis(self, ts: np.ndarray, orders: tuple[int, ...] = (0,)):
        ts = np.asarray(ts, dtype=np.float64)
        seg = self._segments(ts)
        x = ts - self.knots[seg]
        coeffs = self._coeffs[seg]
        vals = tuple(_eval_rows(coeffs, x, order=o) for o in orders)
        return seg, vals

    def query_pose(self, ts: np.ndarray):
        """Pose at times ``ts``; returns rotations (N, 3, 3) and positions (N, 3)."""
        seg, (basis,) = self._basis(ts)
        c = seg - DEGREE
        cum = self._cumulative(basis)
        rot = self._rot_from_cumulative(c, cum)
        offs = np.arange(4)
        trans = np.einsum("nr,nrk->nk", basis, self.trans_ctrl[c[:, None] + offs])
        return rot, trans

    @staticmethod
    def _cumulative(basis: np.ndarray) -> np.ndarray:
        """Suffix sums: cum[:, j] = sum_{l >= j} basis[:, l] (cum[:, 0] == 1)."""
        return np.cumsum(basis[:, ::-1], axis=1)[:, ::-1]

    def _rot_terms(self, c: np.ndarray, cum: np.ndarray):
        """Per-query increments d_j (N, 3, 3 entries) and factors A_j."""
        d = np.stack([self._rel[c + j] for j in range(DEGREE)], axis=1)  # (N, 3, 3v)
        a = exp_so3(cum[:, 1:, None] * d)  # (N, 3, 3, 3)
        return d, a

    def _rot_from_cumulative(self, c: np.ndarray, cum: np.ndarray) -> np.ndarray:
        _, a = self._rot_terms(c, cum)
        rot = self._rot_mats[c]
        for j in range(DEGREE):
            rot = rot @ a[:, j]
        return rot

    def query_body_rates(self, ts: np.ndarray):
        """Angular velocity (body frame), velocity and acceleration (world frame)."""
        seg, (basis, dbasis, ddbasis) = self._basis(ts, orders=(0, 1, 2))
        c = seg - DEGREE
        cum = self._cumulative(basis)
        dcum = self._cumulative(dbasis)
        d, a = self._rot_terms(c, cum)

        omega_j = dcum[:, 1:, None] * d  # (N, 3, 3v)
        # omega = C_j^T omega_j summed, with C_j the suffix product of A's.
        omega = omega_j[:, 2]
        for j in (1, 0):
            suffix = a[:, j + 1]
            for l in range(j + 2, DEGREE):
                suffix = suffix @ a[:, l]
            omega = omega + np.einsum("nba,nb->na", suffix, omega_j[:, j])

        offs = np.arange(4)
        ctrl = self.trans_ctrl[c[:, None] + offs]
        vel = np.einsum("nr,nrk->nk", dbasis, ctrl)
        acc = np.einsum("nr,nrk->nk", ddbasis, ctrl)
        return omega, vel, acc

    def query_sensor_pose(self, ts: np.ndarray, rot_bs: np.ndarray, trans_bs: np.ndarray):
        """Pose of a rigidly mounted sensor: T_ws = T_wb(t) * T_bs."""
        rot, trans = self.query_pose(ts)
        return rot @ rot_bs, np.einsum("nij,j->ni", rot, trans_bs) + trans

    # -- derivatives w.r.t. control points ----------------------------------

    def pose_jacobians(self, ts: np.ndarray):
        """Jacobians of pose at ``ts`` w.r.t. the four active control points.

        Returns ``(ctrl0, d_rot, d_trans)`` where ``ctrl0`` (N,) is the first
        active control index, ``d_rot`` (N, 4, 3, 3) maps a right tangent of
        control point ``ctrl0 + n`` to the right tangent of R(t), and
        ``d_trans`` (N, 4) holds the translation basis weights (the position
        Jacobian w.r.t. control point n is ``d_trans[:, n] * I``).  Control
        points outside the active four have exactly zero Jacobian.
        """
        seg, (basis,) = self._basis(ts)
        c = seg - DEGREE
        cum = self._cumulative(basis)
        d, a = self._rot_terms(c, cum)

        n = len(ts)
        eye = np.broadcast_to(np.eye(3), (n, 3, 3))
        # Suffix products C_j = A_{j+1} ... A_3 (C_3 = I).
        suffix = [None] * (DEGREE + 1)
        suffix[DEGREE] = eye
        for j in range(DEGREE - 1, -1, -1):
            suffix[j] = a[:, j] @ suffix[j + 1]
        # W_j = C_j^T Jr(Bt_j d_j) Bt_j for j = 1..3 (stored at index j-1).
        w = np.empty((n, DEGREE, 3, 3))
        for j in range(1, DEGREE + 1):
            jr = jr_so3(cum[:, j, None] * d[:, j - 1])
            w[:, j - 1] = np.einsum("nba,nbc->nac", suffix[j], jr) * cum[:, j, None, None]

        d_rot = np.zeros((n, 4, 3, 3))
        d_rot[:, 0] = np.swapaxes(suffix[0], 1, 2) - w[:, 0] @ jl_inv_so3(d[:, 0])
        for j in range(1, DEGREE + 1):
            block = w[:, j - 1] @ jr_inv_so3(d[:, j - 1])
            if j < DEGREE:
                block = block - w[:, j] @ jl_inv_so3(d[:, j])
            d_rot[:, j] = block
        return c, d_rot, basis

    def rate_jacobians(self, ts: np.ndarray):
        """Jacobians of body-frame angular velocity and world acceleration.

        Returns ``(ctrl0, d_omega, dd_basis)``: ``d_omega`` (N, 4, 3, 3) maps
        right tangents of the active rotation control points to the angular
        velocity; the acceleration Jacobian w.r.t. translation control point
        ``n`` is ``dd_basis[:, n] * I``.
        """
        seg, (basis, dbasis, ddbasis) = self._basis(ts, orders=(0, 1, 2))
        c = seg - DEGREE
        cum = self._cumulative(basis)
        dcum = self._cumulative(dbasis)
        d, a = self._rot_terms(c, cum)

        n = len(ts)
        eye = np.broadcast_to(np.eye(3), (n, 3, 3))
        suffix = [None] * (DEGREE + 1)
        suffix[DEGREE] = eye
        for j in range(DEGREE - 1, -1, -1):
            suffix[j] = a[:, j] @ suffix[j + 1]
        w = np.empty((n, DEGREE, 3, 3))
        for j in range(1, DEGREE + 1):
            jr = jr_so3(cum[:, j, None] * d[:, j - 1])
            w[:, j - 1] = np.einsum("nba,nbc->nac", suffix[j], jr) * cum[:, j, None, None]

        # dd[j][n] = d d_j / d eps_{c+n}: d_j depends on ctrl c+j-1 (left) and c+j.
        ddj = np.zeros((n, DEGREE, 4, 3, 3))
        for j in range(1, DEGREE + 1):
            ddj[:, j - 1, j] = jr_inv_so3(d[:, j - 1])
            ddj[:, j - 1, j - 1] = -jl_inv_so3(d[:, j - 1])

        d_omega = np.zeros((n, 4, 3, 3))
        for j in range(1, DEGREE + 1):
            cj_t = np.swapaxes(suffix[j], 1, 2)
            omega_j_rot = np.einsum("nab,nb->na", cj_t, dcum[:, j, None] * d[:, j - 1])
            h = hat(omega_j_rot)
            for nn in range(4):
                d_omega[:, nn] += dcum[:, j, None, None] * (cj_t @ ddj[:, j - 1, nn])
                # Dependence of the suffix product C_j on later increments.
                for l in range(j + 1, DEGREE + 1):
                    d_omega[:, nn] += h @ (w[:, l - 1] @ ddj[:, l - 1, nn])
        return c, d_omega, ddbasis

    # -- extension -----------------------------------------------------------

    def extend(self, new_end: float, n_ctrl: int) -> None:
        """Grow the valid interval toward ``new_end`` with ``n_ctrl`` new knots.

        Appends ``n_ctrl`` control points (constant extrapolation of the last
        rotation and translation) and knots continuing after the final knot at
        spacing ``(new_end - t_end) / n_ctrl``.  The validity end is always
        ``knots[-4]``, so it lands exactly on ``new_end`` whenever the
        requested spacing matches the existing tail spacing; odometry keeps a
        fixed per-segment control-point count, which guarantees that.
        Existing segments' basis polynomials are unaffected, so poses in the
        old interval do not change.
        """
        if n_ctrl < 1:
            raise ValueError("n_ctrl must be >= 1")
        if new_end <= self.t_end:
            raise ValueError("new_end must be beyond the current validity end")
        dt = (new_end - self.t_end) / n_ctrl
        new_knots = self.knots[-1] + dt * np.arange(1, n_ctrl + 1)
        self.knots = np.concatenate([self.knots, new_knots])
        self.rot_ctrl = np.concatenate([self.rot_ctrl, np.repeat(self.rot_ctrl[-1:], n_ctrl, axis=0)])
        self.trans_ctrl = np.concatenate([self.trans_ctrl, np.repeat(self.trans_ctrl[-1:], n_ctrl, axis=0)])

        m = len(self.knots) - 1
        coeffs = np.zeros((m, 4, 4))
        coeffs[: len(self._coeffs)] = self._coeffs
        for i in range(max(DEGREE, len(self._coeffs) - DEGREE), m - DEGREE):
            coeffs[i] = segment_blending(self.knots, i)
        self._coeffs = coeffs
        self._rot_mats = np.concatenate([self._rot_mats, np.repeat(self._rot_mats[-1:], n_ctrl, axis=0)])
        new_rel = quat_to_rotvec(
            quat_mul(quat_conj(self.rot_ctrl[-n_ctrl - 1 : -1]), self.rot_ctrl[-n_ctrl:])
        )
        self._rel = np.concatenate([self._rel, new_rel])

    def set_control_points(self, first: int, rot_ctrl: np.ndarray | None, trans_ctrl: np.ndarray | None) -> None:
        """Overwrite a contiguous control-point block (optimizer update path)."""
        if rot_ctrl is not None:
            rot_ctrl = quat_normalize(np.asarray(rot_ctrl, dtype=np.float64))
            for k in range(len(rot_ctrl)):
                prev = rot_ctrl[k - 1] if k else self.rot_ctrl[first - 1] if first else None
                if prev is not None and float(prev @ rot_ctrl[k]) < 0.0:
                    rot_ctrl[k] = -rot_ctrl[k]
            self.rot_ctrl[first : first + len(rot_ctrl)] = rot_ctrl
            self._rot_mats[first : first + len(rot_ctrl)] = quat_to_mat(rot_ctrl)
            lo = max(first - 1, 0)
            hi = min(first + len(rot_ctrl), len(self.rot_ctrl) - 1)
            self._rel[lo:hi] = quat_to_rotvec(
                quat_mul(quat_conj(self.rot_ctrl[lo:hi]), self.rot_ctrl[lo + 1 : hi + 1])
            )
        if trans_ctrl is not None:
            self.trans_ctrl[first : first + len(trans_ctrl)] = trans_ctrl

    # -- constructors --------------------------------------------------------

    @classmethod
    def constant(cls, rot: np.ndarray, trans: np.ndarray, t_start: float, t_end: float, dt: float) -> "Trajectory":
        """Stationary trajectory whose valid interval covers [t_start, t_end]."""
        n_seg = max(1, int(np.ceil((t_end - t_start) / dt - 1e-9)))
        ks = t_start + dt * np.arange(-DEGREE, n_seg + DEGREE + 1)
        n = len(ks) - DEGREE - 1
        quat = mat_to_quat(np.asarray(rot, dtype=np.float64))
        return cls(ks, np.tile(quat, (n, 1)), np.tile(np.asarray(trans, dtype=np.float64), (n, 1)))

    def sample_tum(self, ts: np.ndarray) -> np.ndarray:
        """Rows (t, x, y, z, qx, qy, qz, qw) for trajectory file export."""
        rot, trans = self.query_pose(ts)
        q = mat_to_quat(rot)
        return np.column_stack([ts, trans, q[:, 1], q[:, 2], q[:, 3], q[:, 0]])
