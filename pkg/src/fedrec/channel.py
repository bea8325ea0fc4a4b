"""Gray-coded square QAM, flat Rayleigh fading and pilot dataset generation.

Everything is at symbol rate: one complex sample per transmitted symbol,

    r = alpha * exp(j*phi) * x + w,    w ~ CN(0, noise_var),

with ``noise_var`` fixed at 1 so that the SNR enters only through the
constellation amplitude (see :func:`scale_for_snr`).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Constellation",
    "RayleighFixed",
    "RayleighUniformScale",
    "ChannelDraw",
    "PilotDataset",
    "gray_code",
    "gray_map",
    "scale_for_snr",
    "draw_fading",
    "draw_user_scales",
    "apply_channel",
    "derotate_features",
    "gen_dataset",
    "write_datasets_csv",
    "read_datasets_csv",
]

NOISE_VAR = 1.0
USER_SCALE_RANGE = (0.5, 1.5)


def gray_code(n: int) -> int:
    return n ^ (n >> 1)


def _gray_decode(g: int) -> int:
    n = 0
    while g:
        n ^= g
        g >>= 1
    return n


def _check_order(M: int) -> int:
    k = int(M).bit_length() - 1
    if M < 4 or (1 << k) != M or k % 2:
        raise ValueError(f"square QAM needs M to be a power of 4, got {M}")
    return k


@dataclass(frozen=True)
class Constellation:
    """Square M-QAM with per-axis Gray labels.

    Message ``m`` carries the bit label ``m`` itself (MSB first); the upper
    half of the bits selects the in-phase level, the lower half the
    quadrature level, each through a Gray code.  The unscaled lattice uses
    the odd integers ``{-(L-1), ..., L-1}`` per axis, so label 0 sits at the
    corner ``(-(L-1), -(L-1))``.
    """

    order: int = 16
    amp_scale: float = 1.0
    points: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        k = _check_order(self.order)
        if not (self.amp_scale > 0 and math.isfinite(self.amp_scale)):
            raise ValueError(f"amp_scale must be positive and finite, got {self.amp_scale}")
        half = k // 2
        L = 1 << half
        levels = np.arange(-(L - 1), L, 2, dtype=float)
        # a Gray label g on one axis lands at level index gray^-1(g)
        axis = np.array([levels[_gray_decode(g)] for g in range(L)])
        m = np.arange(self.order)
        pts = self.amp_scale * (axis[m >> half] + 1j * axis[m & (L - 1)])
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def for_snr(cls, snr_db: float, order: int = 16) -> "Constellation":
        return cls(order, scale_for_snr(snr_db, order))

    @property
    def bits_per_symbol(self) -> int:
        return _check_order(self.order)

    @property
    def bit_labels(self) -> list[str]:
        return [format(m, f"0{self.bits_per_symbol}b") for m in range(self.order)]

    @property
    def energies(self) -> np.ndarray:
        return np.abs(self.points) ** 2

    @property
    def mean_energy(self) -> float:
        return float(np.mean(self.energies))

    def bit_errors(self, sent, detected) -> int:
        """Total Hamming distance between the labels of two message arrays."""
        diff = np.bitwise_xor(np.asarray(sent, dtype=np.int64), np.asarray(detected, dtype=np.int64))
        return int(np.bitwise_count(diff).sum(dtype=np.int64))


def unscaled_energy(M: int) -> float:
    """Mean energy of the odd-integer M-QAM lattice, ``2(M-1)/3``."""
    _check_order(M)
    return 2.0 * (M - 1) / 3.0


def scale_for_snr(snr_db: float, M: int = 16) -> float:
    """Amplitude scale giving ``E_s = 10**(snr_db/10) * log2(M)`` at unit noise."""
    k = _check_order(M)
    es = 10.0 ** (snr_db / 10.0) * k * NOISE_VAR
    return math.sqrt(es / unscaled_energy(M))


def gray_map(m, c: Constellation):
    """Constellation point(s) for message index(es) ``m``."""
    m_arr = np.asarray(m)
    if not np.issubdtype(m_arr.dtype, np.integer):
        raise TypeError("message indices must be integers")
    if np.any(m_arr < 0) or np.any(m_arr >= c.order):
        raise ValueError(f"message index out of range [0, {c.order})")
    return c.points[m_arr]


# -- fading -----------------------------------------------------------------

@dataclass(frozen=True)
class RayleighFixed:
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"Rayleigh scale must be positive, got {self.sigma}")

    @property
    def scale_range(self) -> tuple[float, float]:
        return (self.sigma, self.sigma)

    def log_pdf(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        s2 = self.sigma**2
        with np.errstate(divide="ignore"):
            return np.log(alpha) - np.log(s2) - alpha**2 / (2 * s2)


@dataclass(frozen=True)
class RayleighUniformScale:
    """Rayleigh amplitude whose scale is itself uniform on ``[lo, hi]``.

    ``log_pdf`` integrates over the scale with an ``nodes``-point
    Gauss-Legendre rule.
    """

    lo: float = USER_SCALE_RANGE[0]
    hi: float = USER_SCALE_RANGE[1]

    def __post_init__(self):
        if not (0 < self.lo < self.hi):
            raise ValueError(f"need 0 < lo < hi, got lo={self.lo}, hi={self.hi}")

    @property
    def scale_range(self) -> tuple[float, float]:
        return (self.lo, self.hi)

    def _sigma_rule(self, nodes: int):
        t, w = np.polynomial.legendre.leggauss(nodes)
        half = 0.5 * (self.hi - self.lo)
        return self.lo + half * (t + 1.0), w * half / (self.hi - self.lo)

    def log_pdf_over_alpha(self, alpha, nodes: int = 32):
        """``log(p(alpha) / alpha)`` and its derivative in ``alpha``."""
        alpha = np.asarray(alpha, dtype=float)
        s, w = self._sigma_rule(nodes)
        inv = 1.0 / s**2
        a = alpha[..., None]
        logt = np.log(w) + np.log(inv) - 0.5 * a**2 * inv
        top = logt.max(axis=-1, keepdims=True)
        e = np.exp(logt - top)
        tot = e.sum(axis=-1)
        g = np.log(tot) + top[..., 0]
        dg = -(alpha * (e * inv).sum(axis=-1)) / tot
        return g, dg

    def log_pdf(self, alpha, nodes: int = 32):
        alpha = np.asarray(alpha, dtype=float)
        g, _ = self.log_pdf_over_alpha(alpha, nodes)
        with np.errstate(divide="ignore"):
            return np.log(alpha) + g


FadingSpec = RayleighFixed | RayleighUniformScale


@dataclass
class ChannelDraw:
    """Per-symbol fading: magnitude ``alpha`` and phase ``phase`` in [0, 2pi)."""

    alpha: np.ndarray
    phase: np.ndarray

    @property
    def h(self) -> np.ndarray:
        return self.alpha * np.exp(1j * self.phase)


def draw_user_scales(U: int, rng: np.random.Generator, lo: float = USER_SCALE_RANGE[0],
                     hi: float = USER_SCALE_RANGE[1]) -> np.ndarray:
    if U < 1:
        raise ValueError("need at least one user")
    return rng.uniform(lo, hi, size=U)


def draw_fading(rng: np.random.Generator, spec: FadingSpec, size=None, scale=None) -> ChannelDraw:
    """Independent fading draws, one per symbol.

    For :class:`RayleighUniformScale`, pass the user's ``scale``; without it
    a fresh scale is drawn per symbol (samples from the scale mixture).
    Draw order (scale?, unit Rayleigh, phase) does not depend on the scale
    value, so streams stay aligned across configurations.
    """
    if isinstance(spec, RayleighFixed):
        sigma = spec.sigma if scale is None else scale
    elif scale is not None:
        sigma = scale
    else:
        sigma = rng.uniform(spec.lo, spec.hi, size=size)
    unit = rng.rayleigh(1.0, size=size)
    phase = rng.uniform(0.0, 2 * np.pi, size=size)
    return ChannelDraw(alpha=sigma * unit, phase=phase)


def complex_noise(rng: np.random.Generator, size=None, noise_var: float = NOISE_VAR):
    re = rng.standard_normal(size)
    im = rng.standard_normal(size)
    return math.sqrt(noise_var / 2) * (re + 1j * im)


def apply_channel(x, h: ChannelDraw, rng: np.random.Generator | None,
                  noise_var: float = NOISE_VAR):
    """``alpha * exp(j phi) * x`` plus circular complex Gaussian noise.

    ``noise_var=0`` (or ``rng=None``) gives the noiseless output.
    """
    clean = h.alpha * np.exp(1j * h.phase) * np.asarray(x)
    if noise_var == 0 or rng is None:
        return clean
    return clean + complex_noise(rng, np.shape(clean) or None, noise_var)


def derotate_features(r, phase) -> np.ndarray:
    """Real and imaginary part of ``exp(-j*phase) * r``, stacked on the last axis."""
    rr = np.asarray(r) * np.exp(-1j * np.asarray(phase))
    return np.stack([rr.real, rr.imag], axis=-1)


# -- pilot datasets -----------------------------------------------------------

@dataclass
class PilotDataset:
    user_id: int
    sigma: float
    msgs: np.ndarray
    received: np.ndarray
    phases: np.ndarray

    def __len__(self) -> int:
        return len(self.msgs)

    def features(self) -> np.ndarray:
        return derotate_features(self.received, self.phases)


def gen_dataset(user_id: int, sigma: float, n: int, constellation: Constellation,
                rng: np.random.Generator, noise_rng: np.random.Generator | None = None,
                noise_var: float = NOISE_VAR) -> PilotDataset:
    """``n`` uniformly drawn pilot messages through independent Rayleigh(sigma) fading."""
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    msgs = rng.integers(0, constellation.order, size=n)
    h = draw_fading(rng, RayleighFixed(sigma), size=n)
    received = apply_channel(constellation.points[msgs], h, noise_rng or rng, noise_var)
    return PilotDataset(user_id, float(sigma), msgs, received, h.phase)


DATASET_COLUMNS = ["user_id", "index", "msg", "re", "im", "phase", "sigma_u"]


def write_datasets_csv(datasets: Sequence[PilotDataset], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DATASET_COLUMNS)
        for d in datasets:
            for i in range(len(d)):
                r = d.received[i]
                w.writerow([d.user_id, i, int(d.msgs[i]), repr(float(r.real)),
                            repr(float(r.imag)), repr(float(d.phases[i])), repr(d.sigma)])
    return path


def read_datasets_csv(path) -> list[PilotDataset]:
    rows: dict[int, list] = {}
    sigmas: dict[int, float] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            u = int(row["user_id"])
            rows.setdefault(u, []).append(row)
            sigmas[u] = float(row["sigma_u"])
    out = []
    for u in sorted(rows):
        rs = sorted(rows[u], key=lambda r: int(r["index"]))
        out.append(PilotDataset(
            u, sigmas[u],
            np.array([int(r["msg"]) for r in rs]),
            np.array([complex(float(r["re"]), float(r["im"])) for r in rs]),
            np.array([float(r["phase"]) for r in rs]),
        ))
    return out
