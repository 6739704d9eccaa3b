"""Polyspectra estimation from detector traces.

The trace is cut into frames of N samples, each frame is multiplied by an
approximate confined Gaussian window g_j and Fourier transformed with the
e^{+2 pi i j k / N} sign convention,

    a_k = (T/N) sum_j g_j z_j e^{2 pi i j k / N},   T = N dt,

and the spectra follow from unbiased multivariate cumulant estimators
(k-statistics) over the m frames:

    S2(w_k)      ~ N c2(a_k, a_k*) / (T sum g^2)
    S3(w_k, w_l) ~ N c3(a_k, a_l, a_{k+l}*) / (T sum g^3)
    S4(w_k, w_l) ~ N c4(a_k, a_k*, a_l, a_l*) / (T sum g^4)

No further normalization is applied.  Per-point standard errors come from
a delete-one jackknife over frames, streamed in two passes so arbitrarily
long traces never have to fit per-frame data in memory.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .analytic import SpectrumGrid
from .trajectory import TimeTrace


class EstimationError(ValueError):
    """Invalid estimator configuration or insufficient data."""


@dataclass(frozen=True)
class EstimatorConfig:
    """Framing and windowing choices for spectra estimation.

    max_freq_index K bounds the 2-d grids (indices 0..K each axis); the
    bispectrum needs k+l below Nyquist, hence the 2K < N/2 invariant.
    stride defaults to the frame length (disjoint frames); a smaller stride
    overlaps frames and flags the biased-variance mode.
    """

    frame_length: int
    window_s: float = 0.14
    max_freq_index: int = 64
    stride: int | None = None

    def __post_init__(self):
        if self.frame_length < 16:
            raise EstimationError(f"frame_length must be >= 16, got {self.frame_length}")
        if not 0 < self.window_s < 0.5:
            raise EstimationError(f"window_s must lie in (0, 0.5), got {self.window_s}")
        if self.max_freq_index < 1:
            raise EstimationError("max_freq_index must be >= 1")
        if 2 * self.max_freq_index >= self.frame_length // 2:
            raise EstimationError(
                "2*max_freq_index must stay below frame_length/2 (bispectrum index k+l "
                "would cross Nyquist)")
        if self.stride is not None and self.stride < 1:
            raise EstimationError("stride must be >= 1")

    @property
    def hop(self) -> int:
        return self.frame_length if self.stride is None else self.stride

    @property
    def overlapping(self) -> bool:
        return self.hop < self.frame_length


@dataclass(frozen=True)
class FourierFrame:
    """Windowed DFT coefficients of one frame."""

    coeffs: np.ndarray
    index: int


@lru_cache(maxsize=32)
def _window_cached(n: int, s: float) -> np.ndarray:
    c = (n - 1) / 2.0
    sigma = s * n

    def gauss(x):
        return np.exp(-(((np.asarray(x, dtype=float) - c) / (2.0 * sigma)) ** 2))

    j = np.arange(n, dtype=float)
    w = gauss(j) - gauss(-0.5) * (gauss(j + n) + gauss(j - n)) / (gauss(-0.5 + n) + gauss(-0.5 - n))
    w /= w.max()
    w.setflags(write=False)
    return w


def confined_gaussian_window(n: int, s: float = 0.14) -> np.ndarray:
    """Approximate confined Gaussian window of n points, peak-normalized.

    Built from a Gaussian G of width sigma = s*n centered at (n-1)/2 with
    the confinement correction G(-1/2)(G(j+n)+G(j-n))/(G(-1/2+n)+G(-1/2-n))
    subtracted; s around 0.14 gives the near-optimal RMS time-bandwidth
    product.
    """
    if not 0 < s < 0.5:
        raise EstimationError(f"window parameter s must lie in (0, 0.5), got {s}")
    if n < 2:
        raise EstimationError("window needs at least 2 points")
    return _window_cached(int(n), float(s))


def _frame_count(n_samples: int, cfg: EstimatorConfig) -> int:
    if n_samples < cfg.frame_length:
        return 0
    return (n_samples - cfg.frame_length) // cfg.hop + 1


def _iter_coeff_chunks(samples: np.ndarray, cfg: EstimatorConfig, dt: float):
    """Yield windowed Fourier-coefficient chunks of shape (frames, N)."""
    n = cfg.frame_length
    m = _frame_count(samples.size, cfg)
    window = confined_gaussian_window(n, cfg.window_s)
    t_frame = n * dt
    chunk = max(1, (1 << 22) // (n * 16))
    for start in range(0, m, chunk):
        count = min(chunk, m - start)
        if cfg.hop == n:
            block = samples[start * n:(start + count) * n]
            segs = np.asarray(block).reshape(count, n)
        else:
            idx = (start + np.arange(count)) * cfg.hop
            segs = np.stack([np.asarray(samples[i:i + n]) for i in idx])
        yield t_frame * np.fft.ifft(window * segs, axis=1)


def frames(trace: TimeTrace, cfg: EstimatorConfig) -> list[FourierFrame]:
    """All windowed Fourier frames of a trace (materialized; for long traces
    the estimate_* functions stream instead)."""
    m = _frame_count(trace.samples.size, cfg)
    if trace.samples.size < 2 * cfg.frame_length:
        raise EstimationError(
            f"trace too short: {trace.samples.size} samples < 2 frames of {cfg.frame_length}")
    out: list[FourierFrame] = []
    i = 0
    for coeffs in _iter_coeff_chunks(trace.samples, cfg, trace.dt):
        for row in coeffs:
            out.append(FourierFrame(coeffs=row, index=i))
            i += 1
    assert i == m
    return out


# ---------------------------------------------------------------------------
# unbiased multivariate cumulant estimators (k-statistics)

def _require_m(x: np.ndarray, order: int) -> int:
    m = x.shape[0]
    if m < order:
        raise EstimationError(f"cumulant of order {order} needs at least {order} samples, got {m}")
    return m


def k_stat_c2(x: np.ndarray, y: np.ndarray) -> complex | np.ndarray:
    """Unbiased second cumulant m/(m-1) (<xy> - <x><y>) over axis 0."""
    x = np.asarray(x)
    y = np.asarray(y)
    m = _require_m(x, 2)
    return m / (m - 1) * ((x * y).mean(0) - x.mean(0) * y.mean(0))


def k_stat_c3(x: np.ndarray, y: np.ndarray, z: np.ndarray) -> complex | np.ndarray:
    """Unbiased third cumulant over axis 0 (complex inputs allowed)."""
    x, y, z = (np.asarray(v) for v in (x, y, z))
    m = _require_m(x, 3)
    pref = m * m / ((m - 1) * (m - 2))
    return pref * ((x * y * z).mean(0)
                   - (x * y).mean(0) * z.mean(0)
                   - (x * z).mean(0) * y.mean(0)
                   - (y * z).mean(0) * x.mean(0)
                   + 2 * x.mean(0) * y.mean(0) * z.mean(0))


def k_stat_c4(x: np.ndarray, y: np.ndarray, z: np.ndarray, w: np.ndarray) -> complex | np.ndarray:
    """Unbiased fourth cumulant over axis 0 (complex inputs allowed)."""
    x, y, z, w = (np.asarray(v) for v in (x, y, z, w))
    m = _require_m(x, 4)
    means = {
        "xyzw": (x * y * z * w).mean(0),
        "xyz": (x * y * z).mean(0), "xyw": (x * y * w).mean(0),
        "xzw": (x * z * w).mean(0), "yzw": (y * z * w).mean(0),
        "xy": (x * y).mean(0), "xz": (x * z).mean(0), "xw": (x * w).mean(0),
        "yz": (y * z).mean(0), "yw": (y * w).mean(0), "zw": (z * w).mean(0),
        "x": x.mean(0), "y": y.mean(0), "z": z.mean(0), "w": w.mean(0),
    }
    return _c4_from_means(means, m)


def _c4_from_means(mm: dict, m: int):
    pref = m * m / ((m - 1) * (m - 2) * (m - 3))
    return pref * ((m + 1) * mm["xyzw"]
                   - (m + 1) * (mm["xyz"] * mm["w"] + mm["xyw"] * mm["z"]
                                + mm["xzw"] * mm["y"] + mm["yzw"] * mm["x"])
                   - (m - 1) * (mm["xy"] * mm["zw"] + mm["xz"] * mm["yw"]
                                + mm["xw"] * mm["yz"])
                   + 2 * m * (mm["xy"] * mm["z"] * mm["w"] + mm["xz"] * mm["y"] * mm["w"]
                              + mm["xw"] * mm["y"] * mm["z"] + mm["yz"] * mm["x"] * mm["w"]
                              + mm["yw"] * mm["x"] * mm["z"] + mm["zw"] * mm["x"] * mm["y"])
                   - 6 * m * mm["x"] * mm["y"] * mm["z"] * mm["w"])


# ---------------------------------------------------------------------------
# streamed spectra with delete-one jackknife errors

def _stream_estimate(trace: TimeTrace, cfg: EstimatorConfig, monomials, combine,
                     min_m: int):
    """Two-pass streaming engine.

    monomials(a_chunk) -> dict of per-frame monomial arrays (frame axis 0);
    combine(means, m) -> estimator value for m frames.  Returns the full
    estimate, the delete-one jackknife standard error of its real part
    (None when too few frames), and m.
    """
    if trace.samples.size < 2 * cfg.frame_length:
        raise EstimationError(
            f"trace too short: {trace.samples.size} samples < 2 frames of {cfg.frame_length}")
    m = _frame_count(trace.samples.size, cfg)
    if m < min_m:
        raise EstimationError(f"estimator needs at least {min_m} frames, got {m}")

    sums: dict[str, np.ndarray] = {}
    for chunk in _iter_coeff_chunks(trace.samples, cfg, trace.dt):
        for name, arr in monomials(chunk).items():
            total = arr.sum(axis=0)
            if name in sums:
                sums[name] += total
            else:
                sums[name] = total

    theta_full = combine({k: v / m for k, v in sums.items()}, m)

    min_frames = 5  # delete-one estimate must keep >= 4 samples for c4
    if m < min_frames:
        return theta_full, None, m

    center = theta_full.real
    s1 = np.zeros_like(center)
    s2 = np.zeros_like(center)
    for chunk in _iter_coeff_chunks(trace.samples, cfg, trace.dt):
        mono = monomials(chunk)
        loo_means = {k: (sums[k] - mono[k]) / (m - 1) for k in sums}
        dev = combine(loo_means, m - 1).real - center
        s1 += dev.sum(axis=0)
        s2 += (dev * dev).sum(axis=0)
    var = (m - 1) / m * (s2 - s1 * s1 / m)
    return theta_full, np.sqrt(np.maximum(var, 0.0)), m


def _meta(trace: TimeTrace, cfg: EstimatorConfig, m: int, imag_max: float) -> dict:
    return {
        "source": "estimated",
        "dt_ms": trace.dt,
        "frame_length": cfg.frame_length,
        "window_s": cfg.window_s,
        "stride": cfg.hop,
        "n_frames": m,
        "nyquist_rad_khz": np.pi / trace.dt,
        "biased_variance": cfg.overlapping,
        "imag_residue_max": imag_max,
        "model_hash": trace.model_hash,
    }


def estimate_s2(trace: TimeTrace, cfg: EstimatorConfig,
                kmax: int | None = None) -> SpectrumGrid:
    """Power spectrum with jackknife standard errors on indices 0..kmax."""
    n = cfg.frame_length
    if kmax is None:
        kmax = n // 2 - 1
    if not 0 < kmax < n // 2:
        raise EstimationError(f"kmax must lie in (0, {n // 2}), got {kmax}")
    ks = np.arange(kmax + 1)
    t_frame = n * trace.dt
    norm = n / (t_frame * np.sum(confined_gaussian_window(n, cfg.window_s) ** 2))

    def monomials(a):
        x = a[:, ks]
        return {"q": (x * x.conj()).real, "x": x}

    def combine(mm, m):
        return m / (m - 1) * (mm["q"] - (mm["x"] * mm["x"].conj()).real) * norm

    values, errors, m = _stream_estimate(trace, cfg, monomials, combine, min_m=2)
    return SpectrumGrid(order=2, axis1=2 * np.pi * ks / t_frame, axis2=None,
                        values=values, units="kHz",
                        metadata=_meta(trace, cfg, m, 0.0), errors=errors)


def estimate_s3(trace: TimeTrace, cfg: EstimatorConfig) -> SpectrumGrid:
    """Bispectrum on the quadrant grid k, l = 0..K with jackknife errors.

    The real part is the estimate; the largest imaginary mean is reported
    in the metadata as a consistency diagnostic.
    """
    n = cfg.frame_length
    ks = np.arange(cfg.max_freq_index + 1)
    t_frame = n * trace.dt
    norm = n / (t_frame * np.sum(confined_gaussian_window(n, cfg.window_s) ** 3))
    sum_idx = ks[:, None] + ks[None, :]

    def monomials(a):
        x = a[:, ks, None]
        y = a[:, None, ks]
        z = a[:, sum_idx].conj()
        # singles keep their broadcastable shapes; sums/means broadcast later
        return {"xyz": x * y * z, "xy": x * y, "xz": x * z, "yz": y * z,
                "x": x, "y": y, "z": z}

    def combine(mm, m):
        pref = m * m / ((m - 1) * (m - 2)) * norm
        return pref * (mm["xyz"] - mm["xy"] * mm["z"] - mm["xz"] * mm["y"]
                       - mm["yz"] * mm["x"] + 2 * mm["x"] * mm["y"] * mm["z"])

    est, errors, m = _stream_estimate(trace, cfg, monomials, combine, min_m=3)
    imag_max = float(np.max(np.abs(est.imag)))
    axis = 2 * np.pi * ks / t_frame
    return SpectrumGrid(order=3, axis1=axis, axis2=axis.copy(), values=est.real,
                        units="kHz", metadata=_meta(trace, cfg, m, imag_max),
                        errors=errors)


def estimate_s4(trace: TimeTrace, cfg: EstimatorConfig) -> SpectrumGrid:
    """Trispectrum cut on the quadrant grid k, l = 0..K with jackknife errors."""
    n = cfg.frame_length
    ks = np.arange(cfg.max_freq_index + 1)
    t_frame = n * trace.dt
    norm = n / (t_frame * np.sum(confined_gaussian_window(n, cfg.window_s) ** 4))

    def monomials(a):
        x = a[:, ks, None]
        z = a[:, None, ks]
        ax2 = (x * x.conj()).real        # |a_k|^2
        az2 = (z * z.conj()).real        # |a_l|^2
        # missing monomials are conjugates, reconstructed in combine()
        return {"xyzw": ax2 * az2, "xyz": ax2 * z, "xzw": x * az2,
                "xy": ax2, "zw": az2, "xz": x * z, "xw": x * z.conj(),
                "x": x, "z": z}

    def combine(mm, m):
        full = {
            "xyzw": mm["xyzw"],
            "xyz": mm["xyz"], "xyw": mm["xyz"].conj(),
            "xzw": mm["xzw"], "yzw": mm["xzw"].conj(),
            "xy": mm["xy"], "zw": mm["zw"],
            "xz": mm["xz"], "yw": mm["xz"].conj(),
            "xw": mm["xw"], "yz": mm["xw"].conj(),
            "x": mm["x"], "y": mm["x"].conj(),
            "z": mm["z"], "w": mm["z"].conj(),
        }
        return _c4_from_means(full, m) * norm

    est, errors, m = _stream_estimate(trace, cfg, monomials, combine, min_m=4)
    imag_max = float(np.max(np.abs(est.imag)))
    axis = 2 * np.pi * ks / t_frame
    return SpectrumGrid(order=4, axis1=axis, axis2=axis.copy(), values=est.real,
                        units="kHz", metadata=_meta(trace, cfg, m, imag_max),
                        errors=errors)
