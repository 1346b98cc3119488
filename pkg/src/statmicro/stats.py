"""Block jackknife and integrated autocorrelation time."""

from __future__ import annotations

from typing import Callable

import numpy as np


def block_means(series: np.ndarray, n_blocks: int) -> np.ndarray:
    """Means of ``n_blocks`` contiguous blocks along axis 0 (remainder dropped)."""
    series = np.asarray(series)
    size = series.shape[0] // n_blocks
    if size < 1:
        raise ValueError(f"{series.shape[0]} samples cannot fill {n_blocks} blocks")
    trimmed = series[: size * n_blocks]
    return trimmed.reshape((n_blocks, size) + series.shape[1:]).mean(axis=1)


def jackknife(blocks, estimator: Callable[..., np.ndarray]):
    """Leave-one-block-out jackknife.

    ``blocks`` is one array or a tuple of arrays sharing the leading block
    axis; ``estimator`` maps the (tuple of) block-averaged means to an
    estimate.  Returns ``(estimate, standard_error)``.
    """
    if not isinstance(blocks, tuple):
        blocks = (blocks,)
    n = blocks[0].shape[0]
    if n < 2:
        raise ValueError("jackknife needs at least two blocks")
    totals = [b.sum(axis=0) for b in blocks]
    full = np.asarray(estimator(*[t / n for t in totals]))
    loo = np.array([estimator(*[(t - b[k]) / (n - 1) for t, b in zip(totals, blocks)])
                    for k in range(n)])
    err = np.sqrt((n - 1) / n * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))
    return full, err


def autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of a 1-d series at all lags, via zero-padded FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    f = np.fft.rfft(xc, 2 * n)
    return np.fft.irfft(f * np.conj(f), 2 * n)[:n] / n


def integrated_autocorr_time(x: np.ndarray, window_factor: float = 5.0) -> float:
    """``1 + 2 sum rho(k)`` with Sokal's self-consistent window ``k <= c tau``."""
    acov = autocovariance(x)
    if acov[0] <= 0:
        return 1.0
    rho = acov / acov[0]
    taus = 2 * np.cumsum(rho) - 1
    window = np.arange(rho.size) >= window_factor * taus
    k = int(np.argmax(window)) if window.any() else rho.size - 1
    return float(max(taus[k], 1.0))


def effective_sample_size(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    return x.size / integrated_autocorr_time(x)
