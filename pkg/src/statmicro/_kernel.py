"""Compiled single-site Metropolis sweeps over a lattice path.

The state is the fluctuation field ``y[i, t]`` together with its channel
image ``a = rot @ y``, updated incrementally so that a move only touches the
stencils around the proposed site.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _chan(a, j, t, n_steps, periodic):
    if periodic:
        return a[j, t % n_steps]
    if t < 0 or t >= n_steps:
        return 0.0
    return a[j, t]


@njit(cache=True, nogil=True, inline="always")
def delta_action(y, a, rot, kacc, kvel, dem, sup, aexp, bexp, gamma,
                 eps, half_m, periodic, quadratic, i, t, delta):
    """Exact change of the action when ``y[i, t]`` moves by ``delta``.

    Summing the squared stencils that contain site ``t`` gives, per channel,
    a five-point term for the second difference and a three-point term for
    the first difference; zero padding makes the same formula exact on the
    open boundary.
    """
    n_chan, n_steps = a.shape
    inv_e2 = 1.0 / (eps * eps)
    inv_e4 = inv_e2 * inv_e2
    kin = 0.0
    for j in range(n_chan):
        da = rot[j, i] * delta
        if da == 0.0:
            continue
        am2 = _chan(a, j, t - 2, n_steps, periodic)
        am1 = _chan(a, j, t - 1, n_steps, periodic)
        a0 = a[j, t]
        ap1 = _chan(a, j, t + 1, n_steps, periodic)
        ap2 = _chan(a, j, t + 2, n_steps, periodic)
        if kacc[j] != 0.0:
            four = am2 - 4.0 * am1 + 6.0 * a0 - 4.0 * ap1 + ap2
            kin += kacc[j] * inv_e4 * da * (2.0 * four + 6.0 * da)
        if kvel[j] != 0.0:
            two = 2.0 * a0 - am1 - ap1
            kin += kvel[j] * inv_e2 * da * (2.0 * two + 2.0 * da)
    y_old = y[i, t]
    y_new = y_old + delta
    if quadratic:
        pot = gamma[i] * delta * (y_new + y_old)
    else:
        pot = (dem[i] * np.exp(-aexp[i] * y_old) * np.expm1(-aexp[i] * delta)
               + sup[i] * np.exp(bexp[i] * y_old) * np.expm1(bexp[i] * delta))
    return eps * half_m * (kin + pot)


@njit(cache=True, nogil=True)
def metropolis_sweeps(y, a, rot, kacc, kvel, dem, sup, aexp, bexp, gamma,
                      eps, half_m, periodic, quadratic, steps, normals, uniforms,
                      accepted):
    """Run ``normals.shape[0]`` sequential sweeps in place.

    Sites are visited in time order, commodities innermost.  ``accepted[i]``
    counts accepted moves of commodity ``i``.
    """
    n_sweeps = normals.shape[0]
    n_comm, n_steps = y.shape
    n_chan = a.shape[0]
    for sweep in range(n_sweeps):
        for t in range(n_steps):
            for i in range(n_comm):
                delta = steps[i] * normals[sweep, i, t]
                dA = delta_action(y, a, rot, kacc, kvel, dem, sup, aexp, bexp, gamma,
                                  eps, half_m, periodic, quadratic, i, t, delta)
                if dA <= 0.0 or uniforms[sweep, i, t] < np.exp(-dA):
                    y[i, t] += delta
                    for j in range(n_chan):
                        a[j, t] += rot[j, i] * delta
                    accepted[i] += 1
