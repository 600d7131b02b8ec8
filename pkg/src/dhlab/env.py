"""Synthetic stationary coefficient fields on a periodic cell lattice.

A sample holds, per cell, the ellipticity bounds ``lam`` <= ``Lam`` and a
symmetric matrix ``a`` whose spectrum lies in ``[lam, Lam]``.  Everything is a
pure function of the :class:`EnvironmentSpec` (seed included).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MODELS = ("constant", "iid-cell-pareto", "lognormal", "trap-counterexample", "layered")
MODEL_IDS = {name: i for i, name in enumerate(MODELS)}
MAGIC = b"DHL1"
_HEADER = struct.Struct("<4sIIdIQ")


class SpecError(ValueError):
    """Raised for an invalid environment specification."""


@dataclass(frozen=True)
class EnvironmentSpec:
    """Parameters of a coefficient field.

    ``tail_lambda_inv`` and ``tail_Lambda`` are Pareto tail indices (used by
    ``iid-cell-pareto``).  ``sigma_log`` and ``corr_length`` (in cells) drive the
    Gaussian log-fields of ``lognormal`` and ``layered``; ``trap_beta`` is the
    dyadic growth rate of the trap annuli.
    """

    d: int = 2
    N: int = 64
    h: float = 1.0
    model: str = "constant"
    tail_lambda_inv: float = 6.0
    tail_Lambda: float = 6.0
    anisotropy: float = 2.0
    seed: int = 0
    sigma_log: float = 0.5
    corr_length: float = 2.0
    trap_beta: float = 1.0

    def __post_init__(self):
        errors = self.validation_errors()
        if errors:
            raise SpecError("; ".join(errors))

    def validation_errors(self) -> list[str]:
        errs = []
        if int(self.d) != self.d or self.d < 2:
            errs.append(f"dimension d={self.d} must be an integer >= 2")
        if int(self.N) != self.N or self.N < 4:
            errs.append(f"cells_per_side N={self.N} must be an integer >= 4")
        elif self.N & (self.N - 1):
            errs.append(f"cells_per_side N={self.N} must be a power of two")
        if not self.h > 0:
            errs.append(f"cell_size h={self.h} must be positive")
        if self.model not in MODELS:
            errs.append(f"unknown model {self.model!r}; expected one of {MODELS}")
        if not self.tail_lambda_inv > 0 or not self.tail_Lambda > 0:
            errs.append("tail indices must be positive")
        if not self.anisotropy >= 1:
            errs.append(f"anisotropy={self.anisotropy} must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            errs.append("seed must be a 64-bit unsigned integer")
        if self.sigma_log < 0 or not self.corr_length > 0:
            errs.append("sigma_log must be >= 0 and corr_length > 0")
        return errs

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d


@dataclass(frozen=True, eq=False)
class FieldSample:
    spec: EnvironmentSpec
    lam: np.ndarray
    Lam: np.ndarray
    a: np.ndarray = field(repr=False)

    def __post_init__(self):
        for arr in (self.lam, self.Lam, self.a):
            arr.setflags(write=False)

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def N(self) -> int:
        return self.spec.N

    @property
    def h(self) -> float:
        return self.spec.h

    def ellipticity_violation(self) -> float:
        """Largest relative breach of lam|xi|^2 <= <a xi, xi> <= Lam|xi|^2."""
        ev = np.linalg.eigvalsh(self.a)
        lo = (self.lam[..., None] - ev) / self.lam[..., None]
        hi = (ev - self.Lam[..., None]) / self.Lam[..., None]
        return float(max(lo.max(), hi.max(), 0.0))

    def offdiagonal_norm(self) -> float:
        """Frobenius norm of the off-diagonal part of ``a`` (dropped by the stencil)."""
        off = self.a.copy()
        idx = np.arange(self.d)
        off[..., idx, idx] = 0.0
        return float(np.sqrt(np.sum(off**2)))


@dataclass(frozen=True)
class MomentReport:
    p: float
    q: float
    mean_Lambda_p: float
    mean_lambda_inv_q: float
    condition_value: float
    condition_ok: bool
    mean_Lambda: float


def _rng_streams(seed: int, n: int) -> list[np.random.Generator]:
    ss = np.random.SeedSequence(int(seed))
    return [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(n)]


def _random_rotations(rng, ncell, d):
    if d == 2:
        theta = rng.uniform(0.0, 2.0 * np.pi, ncell)
        c, s = np.cos(theta), np.sin(theta)
        return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    z = rng.standard_normal((ncell, d, d))
    q, r = np.linalg.qr(z)
    return q * np.sign(np.diagonal(r, axis1=-2, axis2=-1))[:, None, :]


def _anisotropic_matrices(lam, Lam, kappa, rng_rot, rng_g, d):
    """a = R diag(lam*g) R^T with g_i uniform in [1, min(kappa, Lam/lam)]."""
    flat_lam = lam.reshape(-1)
    top = np.minimum(kappa, Lam.reshape(-1) / flat_lam)
    v = rng_g.uniform(0.0, 1.0, (flat_lam.size, d))
    g = 1.0 + v * (top - 1.0)[:, None]
    rot = _random_rotations(rng_rot, flat_lam.size, d)
    ev = flat_lam[:, None] * g
    a = np.einsum("nij,nj,nkj->nik", rot, ev, rot)
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    # clip roundoff so the spectrum stays inside [lam, Lam]
    w, u = np.linalg.eigh(a)
    w = np.clip(w, flat_lam[:, None], (flat_lam * top)[:, None])
    a = np.einsum("nij,nj,nkj->nik", u, w, u)
    # exact symmetry, so the lower triangle determines a bit for bit
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    return a.reshape(lam.shape + (d, d))


def _torus_offsets(N, d):
    k = np.arange(N)
    k = np.minimum(k, N - k).astype(float)
    grids = np.meshgrid(*([k] * d), indexing="ij")
    return np.sqrt(sum(g**2 for g in grids))


def gaussian_field(rng, N, d, corr_length):
    """Unit-variance periodic Gaussian field with covariance exp(-|r|/corr_length)."""
    cov = np.exp(-_torus_offsets(N, d) / corr_length)
    spec = np.clip(np.fft.fftn(cov).real, 0.0, None)
    noise = rng.standard_normal((N,) * d)
    f = np.fft.ifftn(np.sqrt(spec) * np.fft.fftn(noise)).real
    return f / math.sqrt(cov.flat[0])


def generate_environment(spec: EnvironmentSpec) -> FieldSample:
    d, N, shape = spec.d, spec.N, spec.shape
    r_lam, r_Lam, r_rot, r_g = _rng_streams(spec.seed, 4)

    if spec.model == "constant":
        lam = np.ones(shape)
        Lam = np.ones(shape)
        a = np.broadcast_to(np.eye(d), shape + (d, d)).copy()
        return FieldSample(spec, lam, Lam, a)

    if spec.model == "iid-cell-pareto":
        lam = (1.0 - r_lam.uniform(size=shape)) ** (1.0 / spec.tail_lambda_inv)
        Lam = (1.0 - r_Lam.uniform(size=shape)) ** (-1.0 / spec.tail_Lambda)
        Lam = np.maximum(Lam, lam)
    elif spec.model == "lognormal":
        s = spec.sigma_log
        lam = np.exp(s * gaussian_field(r_lam, N, d, spec.corr_length) - s)
        Lam = np.exp(s * gaussian_field(r_Lam, N, d, spec.corr_length) + s)
        Lam = np.maximum(Lam, lam)
    elif spec.model == "trap-counterexample":
        center = np.full(d, N // 2)
        idx = np.indices(shape).reshape(d, -1).T
        rad = np.sqrt(np.sum((idx - center) ** 2, axis=1)).reshape(shape)
        k = np.where(rad < 1.0, 0.0, np.floor(np.log2(np.maximum(rad, 1.0))) + 1.0)
        lam = 2.0 ** (-spec.trap_beta * k)
        Lam = 2.0 ** (spec.trap_beta * k)
    elif spec.model == "layered":
        # a = diag(a_1(x_1), ..., a_d(x_1)); only the first coordinate matters
        s = spec.sigma_log
        diag = np.empty((d, N))
        for j in range(d):
            line = gaussian_field(r_lam, N, d, spec.corr_length)[(slice(None),) + (0,) * (d - 1)]
            diag[j] = np.exp(s * line)
        expand = (slice(None),) + (None,) * (d - 1)
        diag_full = np.stack([np.broadcast_to(diag[j][expand], shape) for j in range(d)], -1)
        lam = diag_full.min(-1)
        Lam = diag_full.max(-1)
        a = np.zeros(shape + (d, d))
        for j in range(d):
            a[..., j, j] = diag_full[..., j]
        return FieldSample(spec, lam.copy(), Lam.copy(), a)
    else:  # pragma: no cover - guarded by spec validation
        raise SpecError(spec.model)

    a = _anisotropic_matrices(lam, Lam, spec.anisotropy, r_rot, r_g, d)
    return FieldSample(spec, lam, Lam, a)


def _power_mean(x: np.ndarray, r: float) -> float:
    if math.isinf(r):
        return float(np.max(x))
    with np.errstate(over="ignore"):
        val = float(np.mean(x**r))
    return val if math.isfinite(val) else math.inf


def moment_report(sample: FieldSample, p: float, q: float) -> MomentReport:
    """Torus averages of Lam^p and lam^-q (ess sup when the exponent is inf)."""
    if p < 1 or q < 1:
        raise ValueError("moment exponents must be >= 1")
    mp = _power_mean(sample.Lam, p)
    mq = _power_mean(1.0 / sample.lam, q)
    cond = (0.0 if math.isinf(p) else 1.0 / p) + (0.0 if math.isinf(q) else 1.0 / q)
    ok = cond < 2.0 / sample.d and math.isfinite(mp) and math.isfinite(mq)
    return MomentReport(p, q, mp, mq, cond, bool(ok), float(np.mean(sample.Lam)))


# --- serialization ---------------------------------------------------------


def save_environment(sample: FieldSample, path) -> Path:
    """Write the binary sample and its JSON sidecar; returns the binary path."""
    path = Path(path)
    spec = sample.spec
    d = spec.d
    rows, cols = np.tril_indices(d)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, d, spec.N, float(spec.h), MODEL_IDS[spec.model], int(spec.seed)))
        fh.write(np.ascontiguousarray(sample.lam, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(sample.Lam, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(sample.a[..., rows, cols], dtype="<f8").tobytes())
    path.with_suffix(".json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True))
    return path


def load_environment(path) -> FieldSample:
    path = Path(path)
    raw = path.read_bytes()
    magic, d, N, h, model_id, seed = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        spec = EnvironmentSpec(**json.loads(sidecar.read_text()))
    else:
        spec = EnvironmentSpec(d=d, N=N, h=h, model=MODELS[model_id], seed=seed)
    ncell = N**d
    ntri = d * (d + 1) // 2
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != ncell * (2 + ntri):
        raise ValueError(f"{path}: truncated body")
    shape = (N,) * d
    lam = body[:ncell].reshape(shape).copy()
    Lam = body[ncell : 2 * ncell].reshape(shape).copy()
    tri = body[2 * ncell :].reshape(shape + (ntri,))
    rows, cols = np.tril_indices(d)
    a = np.zeros(shape + (d, d))
    a[..., rows, cols] = tri
    a[..., cols, rows] = tri
    return FieldSample(spec, lam, Lam, a)
