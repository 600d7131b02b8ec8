"""Discrete weighted Dirichlet form on the periodic lattice.

Sites are cell centres ``x_i = h * i``.  The form is edge based: every face
between a site and its ``+e_k`` neighbour carries a conductance

    c_f = h^(d-2) * e_k . ((a_i + a_j) / 2) e_k

so that ``E(u, u) = sum_f c_f (u_i - u_j)^2``.  The speed measure is
``m_i = Lam_i * h^d`` and the generator is ``L = -M^{-1} E``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .env import FieldSample


class GridError(ValueError):
    pass


def ball_volume(d: int, r: float) -> float:
    """Lebesgue volume of a d-dimensional Euclidean ball of radius r."""
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * r**d


@dataclass(frozen=True)
class TorusGrid:
    d: int
    N: int
    h: float

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def n_sites(self) -> int:
        return self.N**self.d

    @property
    def side(self) -> float:
        return self.N * self.h

    @property
    def volume(self) -> float:
        return self.side**self.d

    def flat(self, multi) -> int:
        return int(np.ravel_multi_index(tuple(np.asarray(multi) % self.N), self.shape))

    def multi(self, i) -> np.ndarray:
        return np.array(np.unravel_index(i, self.shape)).T

    @cached_property
    def indices(self) -> np.ndarray:
        """(n_sites, d) integer multi-indices in flat order."""
        return np.indices(self.shape).reshape(self.d, -1).T

    def neighbor(self, k: int) -> np.ndarray:
        """Flat index of the +e_k neighbour of every site."""
        idx = self.indices.copy()
        idx[:, k] = (idx[:, k] + 1) % self.N
        return np.ravel_multi_index(tuple(idx.T), self.shape)

    def displacement(self, origin) -> np.ndarray:
        """Minimal torus displacement x_j - x_origin, shape (n_sites, d), physical units."""
        o = self.multi(origin) if np.ndim(origin) == 0 else np.asarray(origin)
        delta = (self.indices - o + self.N // 2) % self.N - self.N // 2
        return delta * self.h

    def distance(self, origin) -> np.ndarray:
        return np.sqrt(np.sum(self.displacement(origin) ** 2, axis=1))

    def center_site(self) -> int:
        return self.flat([self.N // 2] * self.d)


def grid_for(sample: FieldSample) -> TorusGrid:
    return TorusGrid(sample.d, sample.N, sample.h)


@dataclass(eq=False)
class FormMatrix:
    grid: TorusGrid
    E: sp.csr_matrix
    m: np.ndarray
    tails: np.ndarray  # face endpoints i
    heads: np.ndarray  # face endpoints j = i + e_k
    cond: np.ndarray  # face conductances
    directions: np.ndarray  # k for each face
    Lam: np.ndarray
    lam: np.ndarray
    discarded_offdiag: float = 0.0
    conservative: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.m.size

    def energy(self, u, v=None) -> float:
        """E(u, v) summed face by face."""
        du = u[self.tails] - u[self.heads]
        dv = du if v is None else v[self.tails] - v[self.heads]
        return float(np.sum(self.cond * du * dv))

    def apply_generator(self, u):
        return -(self.E @ u) / self.m

    def inner_m(self, u, v) -> float:
        return float(np.sum(u * v * self.m))


def assemble_form(sample: FieldSample, grid: TorusGrid | None = None) -> FormMatrix:
    if grid is None:
        grid = grid_for(sample)
    if (grid.d, grid.N) != (sample.d, sample.N) or not math.isclose(grid.h, sample.h):
        raise GridError(f"grid {grid} does not match sample (d={sample.d}, N={sample.N}, h={sample.h})")
    d, h = grid.d, grid.h
    n = grid.n_sites
    a = sample.a.reshape(n, d, d)
    tails, heads, conds, dirs = [], [], [], []
    site = np.arange(n)
    for k in range(d):
        nb = grid.neighbor(k)
        c = h ** (d - 2) * 0.5 * (a[site, k, k] + a[nb, k, k])
        tails.append(site)
        heads.append(nb)
        conds.append(c)
        dirs.append(np.full(n, k))
    tails = np.concatenate(tails)
    heads = np.concatenate(heads)
    cond = np.concatenate(conds)
    E = _laplacian(n, tails, heads, cond)
    m = sample.Lam.reshape(-1) * h**d
    return FormMatrix(
        grid=grid,
        E=E,
        m=m.copy(),
        tails=tails,
        heads=heads,
        cond=cond,
        directions=np.concatenate(dirs),
        Lam=sample.Lam.reshape(-1).copy(),
        lam=sample.lam.reshape(-1).copy(),
        discarded_offdiag=sample.offdiagonal_norm(),
        meta={"model": sample.spec.model, "seed": sample.spec.seed},
    )


def _laplacian(n, tails, heads, cond) -> sp.csr_matrix:
    rows = np.concatenate([tails, heads, tails, heads])
    cols = np.concatenate([tails, heads, heads, tails])
    vals = np.concatenate([cond, cond, -cond, -cond])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


# --- balls -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Ball:
    grid: TorusGrid
    center: int
    radius: float
    sites: np.ndarray

    @property
    def volume(self) -> float:
        """Discrete volume: site count times h^d (normaliser of ball norms)."""
        return self.sites.size * self.grid.h**self.grid.d

    @property
    def analytic_volume(self) -> float:
        """|B| as it enters the scale factors |B|^(2/d)."""
        return ball_volume(self.grid.d, self.radius)

    def mask(self) -> np.ndarray:
        out = np.zeros(self.grid.n_sites, dtype=bool)
        out[self.sites] = True
        return out

    def scaled(self, factor: float) -> "Ball":
        return make_ball(self.grid, self.center, self.radius * factor)


def make_ball(grid: TorusGrid, center: int, radius: float) -> Ball:
    """Open discrete Euclidean ball in the torus metric."""
    sites = np.flatnonzero(grid.distance(center) < radius)
    if sites.size == 0:
        raise GridError(f"empty ball (radius {radius})")
    return Ball(grid, int(center), float(radius), sites)


@dataclass(eq=False)
class BallRestriction:
    ball: Ball
    form: FormMatrix
    E: sp.csr_matrix
    m: np.ndarray

    @property
    def sites(self) -> np.ndarray:
        return self.ball.sites

    @property
    def center(self) -> int:
        return self.ball.center

    @property
    def radius(self) -> float:
        return self.ball.radius

    def extend(self, u_inner) -> np.ndarray:
        out = np.zeros(self.form.n)
        out[self.sites] = u_inner
        return out

    def as_form(self) -> FormMatrix:
        """The killed form as a stand-alone (non-conservative) FormMatrix."""
        f = self.form
        inside = self.ball.mask()
        keep = inside[f.tails] & inside[f.heads]
        pos = np.full(f.n, -1)
        pos[self.sites] = np.arange(self.sites.size)
        return FormMatrix(
            grid=f.grid,
            E=self.E,
            m=self.m,
            tails=pos[f.tails[keep]],
            heads=pos[f.heads[keep]],
            cond=f.cond[keep],
            directions=f.directions[keep],
            Lam=f.Lam[self.sites],
            lam=f.lam[self.sites],
            discarded_offdiag=f.discarded_offdiag,
            conservative=False,
            meta=dict(f.meta, ball=(self.center, self.radius)),
        )


def restrict_dirichlet(form: FormMatrix, center: int, radius: float) -> BallRestriction:
    """Zero exterior condition on a ball: principal submatrix of E."""
    h = form.grid.h
    if radius < 2 * h:
        raise GridError(f"radius {radius} below 2h = {2 * h}")
    ball = make_ball(form.grid, center, radius)
    if ball.sites.size == form.n:
        raise GridError("ball covers the whole torus; nothing to kill")
    E = form.E[ball.sites][:, ball.sites].tocsr()
    return BallRestriction(ball, form, E, form.m[ball.sites].copy())


def ball_energy_matrix(form: FormMatrix, ball: Ball, weights=None) -> sp.csr_matrix:
    """E_B: faces with both endpoints in the ball, optionally face-weighted.

    Rows and columns are indexed by ``ball.sites``.
    """
    inside = ball.mask()
    keep = inside[form.tails] & inside[form.heads]
    pos = np.full(form.n, -1)
    pos[ball.sites] = np.arange(ball.sites.size)
    c = form.cond[keep] if weights is None else form.cond[keep] * weights[keep]
    return _laplacian(ball.sites.size, pos[form.tails[keep]], pos[form.heads[keep]], c)


def ball_energy(form: FormMatrix, ball: Ball, u) -> float:
    inside = ball.mask()
    keep = inside[form.tails] & inside[form.heads]
    du = u[form.tails[keep]] - u[form.heads[keep]]
    return float(np.sum(form.cond[keep] * du * du))


# --- norms and cutoffs -----------------------------------------------------


def ball_norm(values, ball, r: float, weight: str | np.ndarray = "unweighted", Lam=None) -> float:
    """(1/|B| sum_{i in B} |u_i|^r w_i h^d)^(1/r); r = inf gives max |u| on B.

    ``weight`` is ``"unweighted"``, ``"Lambda"`` (needs ``Lam``) or an explicit
    per-site weight array.  The normaliser is the discrete ball volume.
    """
    ball = getattr(ball, "ball", ball)
    if ball.sites.size == 0:
        raise GridError("empty ball")
    if not (r >= 1):
        raise ValueError(f"norm exponent r={r} must be >= 1")
    u = np.abs(np.asarray(values)[ball.sites])
    if isinstance(weight, str):
        if weight == "unweighted":
            w = None
        elif weight == "Lambda":
            if Lam is None:
                raise ValueError("Lambda weight needs the Lam array")
            w = np.asarray(Lam)[ball.sites]
        else:
            raise ValueError(f"unknown weight {weight!r}")
    else:
        w = np.asarray(weight)[ball.sites]
    if math.isinf(r):
        return float(u.max() if w is None else u[w > 0].max(initial=0.0))
    hd = ball.grid.h**ball.grid.d
    integrand = u**r if w is None else u**r * w
    return float((np.sum(integrand) * hd / ball.volume) ** (1.0 / r))


def radial_cutoff(grid: TorusGrid, center: int, radius: float) -> np.ndarray:
    """eta(z) = (1 - |z - x| / r)_+."""
    return np.clip(1.0 - grid.distance(center) / radius, 0.0, None)


def cutoff_energy(form: FormMatrix, u, eta) -> float:
    """E_eta(u, u): faces weighted by the mean of eta^2 at their endpoints."""
    eta = np.asarray(eta)
    if eta.min() < 0 or eta.max() > 1:
        raise ValueError("cutoff must take values in [0, 1]")
    w = 0.5 * (eta[form.tails] ** 2 + eta[form.heads] ** 2)
    du = u[form.tails] - u[form.heads]
    return float(np.sum(form.cond * w * du * du))


def cutoff_face_weights(form: FormMatrix, eta) -> np.ndarray:
    return 0.5 * (eta[form.tails] ** 2 + eta[form.heads] ** 2)


def grad_sup(form: FormMatrix, eta) -> float:
    """Discrete ||grad eta||_inf: largest face difference over h."""
    return float(np.max(np.abs(eta[form.tails] - eta[form.heads])) / form.grid.h)


def export_coo(matrix, path) -> Path:
    """Write a sparse matrix as 'row col value' lines."""
    path = Path(path)
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        for i in order:
            fh.write(f"{coo.row[i]} {coo.col[i]} {coo.data[i]:.17g}\n")
    return path


def read_coo(path, n: int) -> sp.csr_matrix:
    data = np.loadtxt(path, ndmin=2)
    return sp.csr_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=(n, n))
