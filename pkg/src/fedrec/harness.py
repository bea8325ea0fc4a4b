"""Monte-Carlo BER evaluation and the end-to-end detector comparison.

An experiment runs in three phases per SNR point:

1. every user records ``train_size // U`` pilots through its own fading;
2. the learned schemes are trained and the model-based one estimates its
   Rayleigh scale from the same pilots;
3. all detectors decode one common test stream.

The test stream is cut into fixed-size chunks, each drawn from its own
counter-based stream and decoded independently, so bit-error counts are
integers that do not depend on how many workers process the chunks.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import channel as ch
from .channel import Constellation, PilotDataset, RayleighFixed, RayleighUniformScale
from .detectors import (
    NumericalError,
    QuadratureConfig,
    aggregate_scales,
    estimate_scale_ml,
    map_detect,
    min_distance_detect,
    numeric_map_detect,
    rayleigh_map_metric,
)
from .fed import (
    FedConfig,
    OverheadReport,
    RoundRecord,
    centralized_train,
    comm_overhead,
    fedrec_train,
    noncollab_train,
)
from .nn import ModelParams, TrainConfig, param_count, predict
from .rng import stream

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "TestStream",
    "TestChunk",
    "BerRow",
    "BerReport",
    "detector",
    "ber_evaluate",
    "evaluate_detectors",
    "make_datasets",
    "make_test_stream",
    "run_experiment",
    "emit_csv",
    "read_csv",
    "emit_plot",
]

ALL_SCHEMES = ("NL", "CL", "FedRec", "MD", "MAP", "MinDist")
DETECTOR_KINDS = ("map-numeric", "map-rayleigh", "md-estimated", "min-distance", "nn")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int = 0
    U: int = 5
    fading: str = "iid"
    snr_grid_db: tuple[float, ...] = (5.0, 7.5, 10.0, 12.5)
    train_size: int = 20_000
    test_size: int = 1_000_000
    schemes: tuple[str, ...] = ("MAP", "MD", "FedRec", "CL", "NL")
    fed: FedConfig = field(default_factory=FedConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    quadrature: QuadratureConfig = field(default_factory=QuadratureConfig)
    order: int = 16
    iid_sigma: float = 1.0
    scale_lo: float = ch.USER_SCALE_RANGE[0]
    scale_hi: float = ch.USER_SCALE_RANGE[1]
    # non-iid test scales: one per block of test_size/U symbols, or one per symbol
    test_sigma_mode: str = "block"
    chunk_size: int = 50_000
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "snr_grid_db", tuple(float(s) for s in self.snr_grid_db))
        object.__setattr__(self, "schemes", tuple(self.schemes))
        if self.U < 1:
            raise ConfigError("U", "must be >= 1")
        if self.fading not in ("iid", "non-iid"):
            raise ConfigError("fading", f"expected 'iid' or 'non-iid', got {self.fading!r}")
        if not self.snr_grid_db:
            raise ConfigError("snr_grid_db", "must not be empty")
        if self.test_size < 10_000:
            raise ConfigError("test_size", "must be >= 10000")
        if self.train_size < self.U:
            raise ConfigError("train_size", "must give every user at least one pilot")
        bad = [s for s in self.schemes if s not in ALL_SCHEMES]
        if bad or not self.schemes:
            raise ConfigError("schemes", f"unknown {bad}; choose from {ALL_SCHEMES}")
        if self.test_sigma_mode not in ("block", "symbol"):
            raise ConfigError("test_sigma_mode", "expected 'block' or 'symbol'")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size", "must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        if not 0 < self.scale_lo < self.scale_hi:
            raise ConfigError("scale_lo", "need 0 < scale_lo < scale_hi")
        if not self.iid_sigma > 0:
            raise ConfigError("iid_sigma", "must be positive")
        try:
            ch._check_order(self.order)
        except ValueError as exc:
            raise ConfigError("order", str(exc)) from None
        if self.fed.U != self.U:
            object.__setattr__(self, "fed", replace(self.fed, U=self.U))
        if self.fed.train != self.train:
            object.__setattr__(self, "fed", replace(self.fed, train=self.train))

    @property
    def n_local(self) -> int:
        return self.train_size // self.U

    @property
    def fading_spec(self):
        if self.fading == "iid":
            return RayleighFixed(self.iid_sigma)
        return RayleighUniformScale(self.scale_lo, self.scale_hi)


# -- test stream -------------------------------------------------------------------

@dataclass
class TestChunk:
    __test__ = False

    msgs: np.ndarray
    alpha: np.ndarray
    phase: np.ndarray
    received: np.ndarray

    @property
    def features(self) -> np.ndarray:
        return ch.derotate_features(self.received, self.phase)

    @property
    def draw(self) -> ch.ChannelDraw:
        return ch.ChannelDraw(self.alpha, self.phase)


@dataclass(frozen=True)
class TestStream:
    """Test symbols with fresh fading per symbol.

    For :class:`RayleighUniformScale` the scale is drawn once per block of
    ``ceil(size / users)`` symbols (``sigma_mode="block"``) or per symbol.
    The raw draws do not depend on the constellation, so all SNR points
    share the same messages, fading and unit noise.
    """

    __test__ = False  # not a pytest class

    seed: int
    size: int
    fading: RayleighFixed | RayleighUniformScale = RayleighFixed(1.0)
    users: int = 1
    sigma_mode: str = "block"
    chunk_size: int = 50_000
    noise_var: float = ch.NOISE_VAR

    @property
    def n_chunks(self) -> int:
        return -(-self.size // self.chunk_size)

    def block_sigmas(self) -> np.ndarray:
        f = self.fading
        return stream(self.seed, "test-scales").uniform(f.lo, f.hi, size=self.users)

    def chunk(self, k: int, c: Constellation) -> TestChunk:
        start = k * self.chunk_size
        n = min(self.chunk_size, self.size - start)
        rng = stream(self.seed, "test", k)
        msgs = rng.integers(0, c.order, size=n)
        unit = rng.rayleigh(1.0, size=n)
        phase = rng.uniform(0.0, 2 * np.pi, size=n)
        noise = ch.complex_noise(rng, n, self.noise_var)
        f = self.fading
        if isinstance(f, RayleighFixed):
            sigma = f.sigma
        elif self.sigma_mode == "block":
            block = -(-self.size // self.users)
            sigma = self.block_sigmas()[(start + np.arange(n)) // block]
        else:
            sigma = stream(self.seed, "test-scales", k).uniform(f.lo, f.hi, size=n)
        alpha = sigma * unit
        received = alpha * np.exp(1j * phase) * c.points[msgs] + noise
        return TestChunk(msgs, alpha, phase, received)


# -- detectors ------------------------------------------------------------------------

Decide = Callable[[TestChunk, Constellation], np.ndarray]


def detector(kind: str, *, sigma: float | None = None, fading=None,
             quadrature: QuadratureConfig | None = None,
             models: ModelParams | Sequence[ModelParams] | None = None) -> Decide:
    """Build a decision function from a detector name.

    ``map-rayleigh`` / ``md-estimated`` need ``sigma`` (true or estimated
    scale), ``map-numeric`` needs ``fading``, ``nn`` needs ``models``
    (several models are each scored on the same symbols), ``min-distance``
    uses the true channel of every symbol.  The result maps a chunk to
    decisions of shape ``(n,)`` or ``(n_models, n)``.
    """
    if kind in ("map-rayleigh", "md-estimated"):
        if sigma is None:
            raise ValueError(f"{kind} needs sigma")
        return lambda t, c: map_detect(rayleigh_map_metric(t.features, c, sigma))
    if kind == "map-numeric":
        if fading is None:
            raise ValueError("map-numeric needs a fading spec")
        q = quadrature or QuadratureConfig()
        return lambda t, c: numeric_map_detect(t.features, c, fading, q)
    if kind == "min-distance":
        return lambda t, c: min_distance_detect(t.received, t.draw, c)
    if kind == "nn":
        if models is None:
            raise ValueError("nn needs trained models")
        ms = [models] if isinstance(models, ModelParams) else list(models)
        for i, m in enumerate(ms):
            if not np.all(np.isfinite(m.flat)):
                raise NumericalError(f"model {i} has non-finite parameters")
        return lambda t, c: np.stack([predict(m, t.features) for m in ms])
    raise ValueError(f"unknown detector {kind!r}; expected one of {DETECTOR_KINDS}")


def evaluate_detectors(detectors: Mapping[str, Decide], test: TestStream, c: Constellation,
                       workers: int = 1) -> dict[str, tuple[int, int, float]]:
    """``name -> (bit_errors, total_bits, decode_seconds)`` over the whole stream."""
    k_bits = c.bits_per_symbol

    def one(k: int):
        t = test.chunk(k, c)
        out = {}
        for name, det in detectors.items():
            t0 = time.perf_counter()
            d = np.atleast_2d(det(t, c))
            dt = time.perf_counter() - t0
            errs = sum(c.bit_errors(t.msgs, row) for row in d)
            out[name] = (errs, d.shape[0] * k_bits * len(t.msgs), dt)
        return out

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(one, range(test.n_chunks)))
    else:
        parts = [one(k) for k in range(test.n_chunks)]
    totals = {}
    for name in detectors:
        totals[name] = (
            sum(p[name][0] for p in parts),
            sum(p[name][1] for p in parts),
            sum(p[name][2] for p in parts),
        )
    return totals


def ber_evaluate(det: Decide, test: TestStream, c: Constellation, workers: int = 1) -> tuple[int, int]:
    """Bit errors and total bits of one detector over a test stream."""
    errs, total, _ = evaluate_detectors({"_": det}, test, c, workers)["_"]
    return errs, total


# -- experiment -----------------------------------------------------------------------

@dataclass(frozen=True)
class BerRow:
    scheme: str
    snr_db: float
    bit_errors: int
    total_bits: int
    ber: float
    wall_time_s: float


@dataclass
class BerReport:
    rows: list[BerRow] = field(default_factory=list)
    overhead: dict[str, OverheadReport] = field(default_factory=dict)
    telemetry: dict[float, list[RoundRecord]] = field(default_factory=dict)
    scale_estimates: dict[float, float] = field(default_factory=dict)

    def ber(self, scheme: str, snr_db: float) -> float:
        for r in self.rows:
            if r.scheme == scheme and r.snr_db == snr_db:
                return r.ber
        raise KeyError((scheme, snr_db))

    def row(self, scheme: str, snr_db: float) -> BerRow:
        for r in self.rows:
            if r.scheme == scheme and r.snr_db == snr_db:
                return r
        raise KeyError((scheme, snr_db))

    @property
    def schemes(self) -> list[str]:
        return list(dict.fromkeys(r.scheme for r in self.rows))

    @property
    def snrs(self) -> list[float]:
        return list(dict.fromkeys(r.snr_db for r in self.rows))

    def format_table(self) -> str:
        snrs = self.snrs
        lines = ["scheme  " + "".join(f"{s:>10g}" for s in snrs)]
        for sc in self.schemes:
            lines.append(f"{sc:<8}" + "".join(f"{self.ber(sc, s):>10.6f}" for s in snrs))
        return "\n".join(lines)


def make_datasets(cfg: ExperimentConfig, c: Constellation) -> list[PilotDataset]:
    """Phase (i): every user's pilot recordings at the constellation's SNR."""
    if cfg.fading == "iid":
        scales = np.full(cfg.U, cfg.iid_sigma)
    else:
        scales = ch.draw_user_scales(cfg.U, stream(cfg.master_seed, "scales"), cfg.scale_lo, cfg.scale_hi)
    return [
        ch.gen_dataset(u, float(scales[u]), cfg.n_local, c,
                       stream(cfg.master_seed, "data", u), stream(cfg.master_seed, "noise", u))
        for u in range(cfg.U)
    ]


def make_test_stream(cfg: ExperimentConfig) -> TestStream:
    return TestStream(cfg.master_seed, cfg.test_size, cfg.fading_spec, cfg.U,
                      cfg.test_sigma_mode, cfg.chunk_size)


def run_experiment(cfg: ExperimentConfig, log: Callable[[str], None] | None = None) -> BerReport:
    """Run every requested scheme at every SNR point of ``cfg``."""
    report = BerReport()
    seed = cfg.master_seed
    dims = cfg.fed.layer_dims
    test = make_test_stream(cfg)
    for snr in cfg.snr_grid_db:
        c = Constellation.for_snr(snr, cfg.order)
        datasets = make_datasets(cfg, c)
        dets: dict[str, Decide] = {}
        train_time: dict[str, float] = {}

        def timed(name, fn):
            t0 = time.perf_counter()
            out = fn()
            train_time[name] = time.perf_counter() - t0
            return out

        for scheme in cfg.schemes:
            if scheme == "MAP":
                if cfg.fading == "iid":
                    dets[scheme] = detector("map-rayleigh", sigma=cfg.iid_sigma)
                else:
                    dets[scheme] = detector("map-numeric", fading=cfg.fading_spec, quadrature=cfg.quadrature)
            elif scheme == "MD":
                s_hat = timed(scheme, lambda: aggregate_scales([estimate_scale_ml(d, c) for d in datasets]))
                report.scale_estimates[snr] = s_hat
                dets[scheme] = detector("md-estimated", sigma=s_hat)
            elif scheme == "MinDist":
                dets[scheme] = detector("min-distance")
            elif scheme == "FedRec":
                res = timed(scheme, lambda: fedrec_train(datasets, cfg.fed, seed, cfg.workers))
                report.telemetry[snr] = res.telemetry
                dets[scheme] = detector("nn", models=res.params)
            elif scheme == "CL":
                dets[scheme] = detector("nn", models=timed(
                    scheme, lambda: centralized_train(datasets, cfg.train, seed, dims)))
            elif scheme == "NL":
                dets[scheme] = detector("nn", models=timed(
                    scheme, lambda: noncollab_train(datasets, cfg.train, seed, dims)))
        totals = evaluate_detectors(dets, test, c, cfg.workers)
        for scheme in cfg.schemes:
            errs, bits, dt = totals[scheme]
            report.rows.append(BerRow(scheme, snr, errs, bits, errs / bits, dt + train_time.get(scheme, 0.0)))
            if log:
                log(f"snr={snr:g} dB  {scheme:<7} ber={errs / bits:.6f}")
    n_params = param_count(dims)
    for scheme in ("CL", "FedRec", "NL"):
        if scheme in cfg.schemes:
            report.overhead[scheme] = comm_overhead(scheme, cfg.U, n_params, cfg.fed.rounds, cfg.train_size)
    return report


# -- output ----------------------------------------------------------------------------

CSV_COLUMNS = ["scheme", "snr_db", "bit_errors", "total_bits", "ber", "wall_time_s"]


def emit_csv(report: BerReport, path) -> Path:
    if not report.rows:
        raise ValueError("empty report")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in report.rows:
            w.writerow([r.scheme, repr(r.snr_db), r.bit_errors, r.total_bits, repr(r.ber), repr(r.wall_time_s)])
    return path


def read_csv(path) -> list[BerRow]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        return [BerRow(r["scheme"], float(r["snr_db"]), int(r["bit_errors"]), int(r["total_bits"]),
                       float(r["ber"]), float(r["wall_time_s"])) for r in reader]


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"]


def emit_plot(report: BerReport, path, title: str = "BER vs SNR") -> Path:
    """Standalone SVG, log-scale BER axis, one polyline per scheme."""
    if not report.rows:
        raise ValueError("empty report")
    W, H, L, R, T, B = 640, 440, 70, 130, 40, 50
    snrs = report.snrs
    x0, x1 = min(snrs), max(snrs)
    if x0 == x1:
        x0, x1 = x0 - 1, x1 + 1
    bers = [r.ber for r in report.rows if r.ber > 0]
    lo = math.floor(math.log10(min(bers))) if bers else -6
    hi = math.ceil(math.log10(max(bers))) if bers else 0
    if hi == lo:
        hi += 1
    floor_ber = 10.0**lo

    def px(s):
        return L + (s - x0) / (x1 - x0) * (W - L - R)

    def py(b):
        return T + (hi - math.log10(max(b, floor_ber))) / (hi - lo) * (H - T - B)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-size="14">{title}</text>',
    ]
    for d in range(lo, hi + 1):
        y = py(10.0**d)
        parts.append(f'<line x1="{L}" y1="{y:.2f}" x2="{W - R}" y2="{y:.2f}" stroke="#ddd"/>')
        parts.append(f'<text x="{L - 6}" y="{y + 4:.2f}" text-anchor="end">1e{d}</text>')
    for s in snrs:
        x = px(s)
        parts.append(f'<line x1="{x:.2f}" y1="{T}" x2="{x:.2f}" y2="{H - B}" stroke="#eee"/>')
        parts.append(f'<text x="{x:.2f}" y="{H - B + 16}" text-anchor="middle">{s:g}</text>')
    parts.append(f'<rect x="{L}" y="{T}" width="{W - L - R}" height="{H - T - B}" fill="none" stroke="black"/>')
    parts.append(f'<text x="{(L + W - R) / 2:.1f}" y="{H - 12}" text-anchor="middle">SNR per bit (dB)</text>')
    parts.append(f'<text x="16" y="{(T + H - B) / 2:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {(T + H - B) / 2:.1f})">BER</text>')
    for i, sc in enumerate(report.schemes):
        colour = _PALETTE[i % len(_PALETTE)]
        pts = sorted((r.snr_db, r.ber) for r in report.rows if r.scheme == sc)
        coords = " ".join(f"{px(s):.2f},{py(b):.2f}" for s, b in pts)
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{coords}"/>')
        ly = T + 14 + 18 * i
        parts.append(f'<line x1="{W - R + 10}" y1="{ly}" x2="{W - R + 34}" y2="{ly}" stroke="{colour}" stroke-width="2"/>')
        parts.append(f'<text x="{W - R + 40}" y="{ly + 4}">{sc}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path
