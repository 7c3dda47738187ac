"""Pairwise distributions, the total-variation ball and its projection,
and the similarity-based noise-ratio estimator.

A pair distribution lives on the ``n+ x n-`` grid of (positive, negative)
batch rows. The empirical reference for group pair ``(z, z')`` is uniform on
the block of positives from ``z`` and negatives from ``z'``; the adversarial
distribution may move up to ``gamma`` TV mass (``2 * gamma`` in L1) anywhere on
the grid.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .errors import DegeneratePairError, ParseError, ShapeError

PROJECTION_MAX_ITER = 500
PROJECTION_TOL = 1e-8
# the dual solver groups coordinates by reference value; beyond this many
# distinct values Dykstra is used instead
DUAL_MAX_CLASSES = 64
# slack used when deciding that an input is already inside the ball
_FEASIBLE_TOL = 1e-12


@dataclass
class PairDistribution:
    weights: np.ndarray
    pair: tuple[int, int]
    reference: bool = False

    def copy(self) -> "PairDistribution":
        return PairDistribution(self.weights.copy(), self.pair, self.reference)

    def l1_to(self, other: "PairDistribution") -> float:
        return float(np.abs(self.weights - other.weights).sum())


@dataclass
class GammaMatrix:
    """Per group-pair TV radii; ``nan`` marks an undefined (unestimable) entry."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ShapeError(f"gamma matrix must be square, got {self.values.shape}")
        finite = self.values[~np.isnan(self.values)]
        if np.any((finite < 0) | (finite > 1)):
            raise ValueError("gamma entries must lie in [0, 1]")

    @classmethod
    def constant(cls, m: int, gamma: float) -> "GammaMatrix":
        return cls(np.full((m, m), float(gamma)))

    @property
    def num_groups(self) -> int:
        return self.values.shape[0]

    def radius(self, z: int, zp: int) -> float:
        g = self.values[z - 1, zp - 1]
        # an undefined estimate gives no robustness budget
        return 0.0 if math.isnan(g) else float(g)

    def to_list(self) -> list:
        return [[None if math.isnan(v) else float(v) for v in row] for row in self.values]

    def to_json(self) -> str:
        return json.dumps({"gamma": self.to_list()})


@dataclass(frozen=True)
class GammaRecord:
    sample_id: str
    label: int
    group: int
    sim_pos: float
    sim_neg: float

    @property
    def clean(self) -> bool:
        # a tie counts as noisy
        return self.sim_pos > self.sim_neg


def empirical_pair_weights(pos_groups, neg_groups, z: int, zp: int) -> np.ndarray:
    pos_in = np.asarray(pos_groups) == z
    neg_in = np.asarray(neg_groups) == zp
    n_zp, n_zn = int(pos_in.sum()), int(neg_in.sum())
    if n_zp == 0 or n_zn == 0:
        raise DegeneratePairError(
            f"group pair ({z}, {zp}) has {n_zp} positives and {n_zn} negatives in the batch"
        )
    return np.outer(pos_in, neg_in) / (n_zp * n_zn)


def empirical_pair_dist(batch, z: int, zp: int) -> PairDistribution:
    """Uniform distribution over the batch pairs with positive in ``z`` and negative in ``zp``."""
    w = empirical_pair_weights(batch.pos_groups, batch.neg_groups, z, zp)
    return PairDistribution(w, (z, zp), reference=True)


def project_simplex(v: np.ndarray, total: float = 1.0) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum(x) = total}`` (sort-based, O(n log n))."""
    flat = np.asarray(v, dtype=np.float64).ravel()
    u = np.sort(flat)[::-1]
    css = np.cumsum(u) - total
    k = np.arange(1, u.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(flat - theta, 0.0).reshape(np.shape(v))


def project_l1_ball(v: np.ndarray, radius: float, center: np.ndarray | None = None) -> np.ndarray:
    """Euclidean projection onto ``{x : ||x - center||_1 <= radius}``."""
    v = np.asarray(v, dtype=np.float64)
    c = np.zeros_like(v) if center is None else np.asarray(center, dtype=np.float64)
    d = v - c
    if np.abs(d).sum() <= radius:
        return v.copy()
    if radius <= 0:
        return c.copy()
    mag = project_simplex(np.abs(d), radius)
    return c + np.sign(d) * mag


def _in_ball(q: np.ndarray, p_hat: np.ndarray, budget: float, tol: float) -> bool:
    return (
        q.min() >= 0.0
        and abs(q.sum() - 1.0) <= tol
        and np.abs(q - p_hat).sum() <= budget + tol
    )


def _shrink_to_ball(x: np.ndarray, p_hat: np.ndarray, budget: float) -> np.ndarray:
    """Simplex-project ``x`` then pull it toward ``p_hat`` until the L1 budget holds."""
    y = project_simplex(x)
    dist = np.abs(y - p_hat).sum()
    if dist <= budget:
        return y
    t = budget / dist
    return p_hat + t * (y - p_hat)


def project_tv_ball(p_tilde, p_hat, gamma: float, method: str = "auto",
                    max_iter: int = PROJECTION_MAX_ITER, tol: float = PROJECTION_TOL):
    """Nearest point (Euclidean) to ``p_tilde`` in ``{q in simplex : ||q - p_hat||_1 <= 2 gamma}``.

    ``method``:

    * ``"dykstra"``: alternating simplex / L1-ball projections with Dykstra
      corrections, capped at ``max_iter`` rounds.
    * ``"dual"``: solves the two KKT multipliers (sum and L1 budget) by
      nested root finding. Each coordinate's solution is a clipped soft
      threshold of ``v - tau`` around its reference value, so coordinates
      sharing a reference value are handled with one sorted array.
    * ``"auto"``: ``"dual"`` when ``p_hat`` has at most ``DUAL_MAX_CLASSES``
      distinct values (always true for empirical pair distributions),
      otherwise ``"dykstra"``.

    Whatever the method, the result is made feasible by a final simplex
    projection followed by a straight-line shrink toward ``p_hat``.
    Accepts ``PairDistribution`` objects or plain arrays and returns the same
    kind as ``p_tilde``.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    as_dist = isinstance(p_tilde, PairDistribution)
    v = np.asarray(p_tilde.weights if as_dist else p_tilde, dtype=np.float64)
    ref = np.asarray(getattr(p_hat, "weights", p_hat), dtype=np.float64)
    if v.shape != ref.shape:
        raise ShapeError(f"p_tilde shape {v.shape} != p_hat shape {ref.shape}")

    budget = 2.0 * gamma
    if budget == 0.0:
        out = ref.copy()
    elif _in_ball(v, ref, budget, _FEASIBLE_TOL):
        out = v.copy()
    else:
        if method == "auto":
            method = "dual" if np.unique(ref).size <= DUAL_MAX_CLASSES else "dykstra"
        if method == "dual":
            x = _dual_projection(v.ravel(), ref.ravel(), budget)
        elif method == "dykstra":
            x = _dykstra(v.ravel(), ref.ravel(), budget, max_iter, tol)
        else:
            raise ValueError(f"unknown projection method {method!r}")
        out = _shrink_to_ball(x, ref.ravel(), budget).reshape(v.shape)

    if as_dist:
        return PairDistribution(out, p_tilde.pair, reference=False)
    return out


def _dykstra(x: np.ndarray, c: np.ndarray, budget: float, max_iter: int,
             tol: float) -> np.ndarray:
    x = x.copy()
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    for _ in range(max_iter):
        y = project_simplex(x + p)
        p = x + p - y
        x_new = project_l1_ball(y + q, budget, c)
        q = y + q - x_new
        step = np.abs(x_new - x).max()
        x = x_new
        if step <= tol and np.abs(x - y).max() <= tol:
            break
    return x


class _RefClass:
    """Coordinates sharing one reference value ``c``; ``w = v - c`` sorted."""

    def __init__(self, c: float, w: np.ndarray):
        self.c = c
        self.w = np.sort(w)
        self.prefix = np.concatenate(([0.0], np.cumsum(self.w)))
        self.n = self.w.size

    def sums(self, tau: float, mu: float) -> tuple[float, float]:
        """Return (sum of q, L1 distance to c) for multipliers ``tau``, ``mu``."""
        w, pre, c = self.w, self.prefix, self.c
        hi = np.searchsorted(w, tau + mu, side="right")   # w > tau + mu: q - c = w - tau - mu
        mid = np.searchsorted(w, tau - mu, side="left")   # w < tau - mu: q - c = w - tau + mu ...
        low = np.searchsorted(w, tau - mu - c, side="right")  # ... floored at -c (q = 0)
        low = min(low, mid)
        up = (pre[-1] - pre[hi]) - (self.n - hi) * (tau + mu)
        down = (pre[mid] - pre[low]) - (mid - low) * (tau - mu)
        floor = c * low
        return self.n * c + up + down - floor, up - down + floor


def _dual_projection(v: np.ndarray, c: np.ndarray, budget: float) -> np.ndarray:
    values, inverse = np.unique(c, return_inverse=True)
    classes = [_RefClass(val, v[inverse == k] - val) for k, val in enumerate(values)]
    d = v - c
    spread = float(d.max() - d.min()) + 1.0

    def total(tau, mu):
        s = l1 = 0.0
        for cl in classes:
            a, b = cl.sums(tau, mu)
            s += a
            l1 += b
        return s, l1

    def solve_tau(mu):
        lo = float(d.min()) - mu - 1.0
        hi = float(v.max()) + mu + 1.0
        return brentq(lambda t: total(t, mu)[0] - 1.0, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=500)

    def l1_excess(mu):
        return total(solve_tau(mu), mu)[1] - budget

    if l1_excess(0.0) <= 0.0:
        mu = 0.0
    else:
        mu = brentq(l1_excess, 0.0, spread, xtol=1e-15, rtol=1e-15, maxiter=500)
    tau = solve_tau(mu)
    r = d - tau
    shift = np.where(r > mu, r - mu, np.where(r < -mu, r + mu, 0.0))
    return c + np.maximum(shift, -c)


def ascent_grad_pair_dist(pair_matrix, lam: float) -> np.ndarray:
    """Ascent direction for a pair distribution: ``lam`` times the pair matrix.

    The surrogate gap is linear in the distribution, so its gradient is the
    pair matrix itself.
    """
    return lam * np.asarray(pair_matrix, dtype=np.float64)


def greedy_tv_max(p_hat, values, gamma: float) -> tuple[float, np.ndarray]:
    """Exact maximum of ``sum(q * values)`` over the TV ball of radius ``gamma``.

    Mass is taken from the lowest-valued support points of ``p_hat`` and
    placed on the single highest-valued coordinate (lowest flat index on ties).
    """
    ref = np.asarray(getattr(p_hat, "weights", p_hat), dtype=np.float64)
    vals = np.asarray(values, dtype=np.float64)
    if ref.shape != vals.shape:
        raise ShapeError(f"p_hat shape {ref.shape} != values shape {vals.shape}")
    q = ref.ravel().copy()
    fv = vals.ravel()
    top = int(np.argmax(fv))
    budget = min(max(float(gamma), 0.0), 1.0)

    support = np.nonzero(q > 0)[0]
    order = support[np.argsort(fv[support], kind="stable")]
    moved = 0.0
    for i in order:
        if budget - moved <= 0.0 or fv[i] >= fv[top]:
            break
        take = min(q[i], budget - moved)
        q[i] -= take
        moved += take
    q[top] += moved
    q = q.reshape(ref.shape)
    return float(np.sum(q * vals)), q


def tv_distance(p, q, atol: float = 1e-6) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {q.shape}")
    for name, d in (("p", p), ("q", q)):
        if d.min() < -atol or abs(d.sum() - 1.0) > atol:
            raise ValueError(f"{name} is not a probability distribution (sum={d.sum():.8g})")
    return 0.5 * float(np.abs(p - q).sum())


def estimate_gamma(records, m: int) -> GammaMatrix:
    """Fraction of noisy-group (positive, negative) pairs in which either side
    is flagged noisy by the similarity test.

    Counting the pairs reduces to ``1 - f_pos(z) * f_neg(z')`` with ``f`` the
    clean-flagged fraction of positives in ``z`` / negatives in ``z'``.
    """
    records = list(records)
    if not records:
        raise ValueError("no similarity records")
    n_pos = np.zeros(m)
    c_pos = np.zeros(m)
    n_neg = np.zeros(m)
    c_neg = np.zeros(m)
    for r in records:
        if not 1 <= r.group <= m:
            raise ValueError(f"record {r.sample_id}: group {r.group} outside 1..{m}")
        if r.label == 1:
            n_pos[r.group - 1] += 1
            c_pos[r.group - 1] += r.clean
        else:
            n_neg[r.group - 1] += 1
            c_neg[r.group - 1] += r.clean
    out = np.full((m, m), np.nan)
    for z in range(m):
        for zp in range(m):
            if n_pos[z] and n_neg[zp]:
                total = n_pos[z] * n_neg[zp]
                out[z, zp] = (total - c_pos[z] * c_neg[zp]) / total
    return GammaMatrix(out)


SIMILARITY_COLUMNS = ("id", "label", "group", "sim_pos", "sim_neg")


def read_similarity_file(path) -> list[GammaRecord]:
    """Parse ``id,label,group,sim_pos,sim_neg`` rows; labels are +1/-1 (or 1/0)."""
    records = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SIMILARITY_COLUMNS:
            raise ParseError(f"expected header {','.join(SIMILARITY_COLUMNS)}, got {header}", row=1)
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(SIMILARITY_COLUMNS):
                raise ParseError(f"expected 5 fields, got {len(row)}", row=line_no)
            sid, label, group, sp, sn = (c.strip() for c in row)
            try:
                lab = int(float(label))
                grp = int(group)
                rec = GammaRecord(sid, 1 if lab == 1 else -1, grp, float(sp), float(sn))
            except ValueError as exc:
                raise ParseError(str(exc), row=line_no) from None
            if lab not in (1, 0, -1):
                raise ParseError(f"label must be 1, 0 or -1, got {label}", row=line_no)
            records.append(rec)
    return records
