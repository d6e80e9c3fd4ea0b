"""Singular-value statistics of weight tensors.

Tensors with more than two dims are viewed as ``(d_out, d_in)`` matrices by
keeping dim 0 as rows and flattening the rest row-major, so a conv kernel
``(out, in, kh, kw)`` becomes ``out x (in*kh*kw)``. All spectra are computed
in float64 whatever the storage dtype.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .errors import NonFiniteData, NotEligible, ZeroTensor

DEFAULT_ZERO_TOL = 1e-12
DEFAULT_SIGMA_CAP = 64


@dataclass(frozen=True)
class SpectralSummary:
    name: str
    m: int
    n: int
    sigmas: tuple
    sigma_max: float
    sigma_min_nonzero: float
    kappa: float
    frobenius: float
    log_volume: float
    numerical_rank: int
    zero_tolerance_used: float

    @property
    def tall(self):
        """More rows than columns: W W^T is singular, so the output entropy is -inf."""
        return self.m > self.n

    def to_json(self, sigma_cap=DEFAULT_SIGMA_CAP):
        d = asdict(self)
        d["sigmas"] = list(self.sigmas[:sigma_cap])
        d["m_gt_n"] = self.tall
        return json.dumps(d, sort_keys=True, separators=(",", ":"))


def reshape_to_matrix(tensor):
    """Return ``tensor`` as a float64 ``(d_out, d_in)`` matrix."""
    shape = tuple(tensor.shape)
    if len(shape) < 2:
        raise NotEligible(f"{tensor.name}: {len(shape)}-D tensor has no matrix form")
    values = tensor.values() if hasattr(tensor, "values") else np.asarray(tensor)
    return np.asarray(values, dtype=np.float64).reshape(shape[0], -1)


def singular_values(matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or min(matrix.shape) < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {matrix.shape}")
    bad = np.flatnonzero(~np.isfinite(matrix))
    if bad.size:
        raise NonFiniteData("<matrix>", int(bad[0]))
    s = np.linalg.svd(matrix, compute_uv=False)
    # LAPACK already returns descending order; a stable sort keeps ties as-is
    return s[np.argsort(-s, kind="stable")]


def _threshold(sigmas, zero_tol):
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if sigmas.size == 0:
        raise ValueError("empty spectrum")
    sigma_max = float(sigmas[0])
    cut = zero_tol * sigma_max
    kept = sigmas[sigmas > cut]
    if sigma_max <= 0.0 or kept.size == 0:
        raise ZeroTensor()
    return sigma_max, kept


def condition_number(sigmas, zero_tol=DEFAULT_ZERO_TOL):
    """``(kappa, sigma_min_nonzero)`` for a descending spectrum.

    Singular values at or below ``zero_tol * sigma_max`` count as zero.
    """
    sigma_max, kept = _threshold(sigmas, zero_tol)
    sigma_min = float(kept[-1])
    return sigma_max / sigma_min, sigma_min


def numerical_rank(sigmas, zero_tol=DEFAULT_ZERO_TOL):
    try:
        return int(_threshold(sigmas, zero_tol)[1].size)
    except ZeroTensor:
        return 0


def frobenius_norm(matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(matrix))
    if bad.size:
        raise NonFiniteData("<matrix>", int(bad[0]))
    return float(math.sqrt(np.sum(matrix * matrix)))


def log_volume(sigmas, zero_tol=DEFAULT_ZERO_TOL):
    """``(sum of log2 sigma over non-zero values, number of terms)``."""
    _, kept = _threshold(sigmas, zero_tol)
    return float(np.sum(np.log2(kept))), int(kept.size)


def spectral_summary(tensor, zero_tol=DEFAULT_ZERO_TOL):
    matrix = reshape_to_matrix(tensor)
    try:
        sigmas = singular_values(matrix)
    except NonFiniteData as exc:
        raise NonFiniteData(tensor.name, exc.index) from None
    try:
        kappa, sigma_min = condition_number(sigmas, zero_tol)
        logvol, rank = log_volume(sigmas, zero_tol)
    except ZeroTensor:
        raise ZeroTensor(tensor.name) from None
    m, n = matrix.shape
    return SpectralSummary(
        name=tensor.name,
        m=int(m),
        n=int(n),
        sigmas=tuple(float(s) for s in sigmas),
        sigma_max=float(sigmas[0]),
        sigma_min_nonzero=sigma_min,
        kappa=kappa,
        frobenius=frobenius_norm(matrix),
        log_volume=logvol,
        numerical_rank=rank,
        zero_tolerance_used=float(zero_tol),
    )


def summarize_view(view, names, zero_tol=DEFAULT_ZERO_TOL, threads=1, on_zero=None):
    """Summaries for ``names`` in ``view``, returned in name order.

    Zero tensors are skipped and reported through ``on_zero(name)`` when
    given; otherwise :class:`ZeroTensor` propagates.
    """
    from .tensor_io import read_tensor

    def one(name):
        try:
            return spectral_summary(read_tensor(view, name), zero_tol)
        except ZeroTensor:
            if on_zero is None:
                raise
            on_zero(name)
            return None

    names = sorted(names)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, names))
    else:
        results = [one(n) for n in names]
    return [r for r in results if r is not None]
