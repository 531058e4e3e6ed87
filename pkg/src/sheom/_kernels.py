"""Compiled inner loops for batched qubit-hierarchy trajectories.

One tile of Platen/Euler-Maruyama steps, fused per trajectory row: a
block-sparse generator product (hierarchy coupling is nearest-neighbour in
tier space, so the drift superoperator has a handful of 4x4 blocks per
block row), the nonlinear conditioning scalar, trace renormalization,
positivity projection of the 2x2 physical block, divergence checks and the
stride-aggregated detector record.  Semantics match the numpy path in
`engine.propagate_stochastic_batch` (asserted in the tests); fastmath is
off so summation order, and therefore output bits, are fixed.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):  # pragma: no cover
        def wrap(f):
            return f

        return wrap if not (args and callable(args[0])) else args[0]


@njit(cache=True, fastmath=False)
def _apply_generator(y_row, blk_ptr, blk_col, blk_mat, diff_blk, out_a, out_b):
    """out_a = drift @ y, out_b = per-tier diffusion block @ y (4x4 blocks)."""
    n_blocks = blk_ptr.shape[0] - 1
    for i in range(n_blocks):
        base = 4 * i
        for r in range(4):
            out_a[base + r] = 0.0 + 0.0j
        for p in range(blk_ptr[i], blk_ptr[i + 1]):
            cbase = 4 * blk_col[p]
            m = blk_mat[p]
            for r in range(4):
                acc = (
                    m[r, 0] * y_row[cbase]
                    + m[r, 1] * y_row[cbase + 1]
                    + m[r, 2] * y_row[cbase + 2]
                    + m[r, 3] * y_row[cbase + 3]
                )
                out_a[base + r] += acc
        for r in range(4):
            out_b[base + r] = (
                diff_blk[r, 0] * y_row[base]
                + diff_blk[r, 1] * y_row[base + 1]
                + diff_blk[r, 2] * y_row[base + 2]
                + diff_blk[r, 3] * y_row[base + 3]
            )


@njit(cache=True, fastmath=False)
def qubit_meas_tile(
    y,  # (B, D) complex128, updated in place
    blk_ptr,  # (n_idx + 1,) int64 block-CSR row pointers of the drift
    blk_col,  # (nnzb,) int64 block columns
    blk_mat,  # (nnzb, 4, 4) complex128 blocks
    diff_blk,  # (4, 4) complex128 per-tier linear diffusion block
    w_tr,  # (4,) complex128: conditioning trace functional
    diff_pref,  # float
    w_rec,  # (4,) complex128: record functional
    rec_const,  # float (2 eta kappa)
    noise_over_dt,  # float
    dw_tile,  # (B, T) float64
    dt,
    sqrt_dt,
    t0_step,  # global index of the first step in this tile
    record_stride,
    use_platen,  # bool
    renormalize,  # bool
    project,  # bool
    fro_gate,  # float: (trace-norm threshold)^2 / d
    div_threshold,  # float: trace-norm divergence threshold
    cur_acc,  # (B,) float64 running stride sum
    currents,  # (B, S) float64
    obs_w,  # (n_obs, 4) complex128
    obs_out,  # (n_obs, B, S) float64
    diverged,  # (B,) bool
    div_time,  # (B,) float64
    trace_dev_max,  # (B,)
    herm_defect_max,  # (B,)
    purity_max,  # (B,)
    t_origin,  # float: physical time of global step 0
):
    n_traj, dim = y.shape
    n_tile = dw_tile.shape[1]
    n_obs = obs_w.shape[0]

    a1 = np.empty(dim, np.complex128)
    b1 = np.empty(dim, np.complex128)
    ysup = np.empty(dim, np.complex128)
    a2 = np.empty(dim, np.complex128)
    b2 = np.empty(dim, np.complex128)
    ynew = np.empty(dim, np.complex128)

    for k in range(n_tile):
        gstep = t0_step + k
        for b in range(n_traj):
            if diverged[b]:
                continue
            dw = dw_tile[b, k]
            yb = y[b]

            # detector record from the pre-step state (Ito convention)
            if rec_const != 0.0:
                sig = 0.0
                for i in range(4):
                    sig += (yb[i] * w_rec[i]).real
                cur_acc[b] += rec_const * sig + noise_over_dt * dw

            s1 = yb[0] * w_tr[0] + yb[1] * w_tr[1] + yb[2] * w_tr[2] + yb[3] * w_tr[3]
            _apply_generator(yb, blk_ptr, blk_col, blk_mat, diff_blk, a1, b1)
            for j in range(dim):
                b1[j] = b1[j] - diff_pref * s1 * yb[j]

            if use_platen:
                for j in range(dim):
                    ysup[j] = yb[j] + dt * a1[j] + sqrt_dt * b1[j]
                s2 = (
                    ysup[0] * w_tr[0]
                    + ysup[1] * w_tr[1]
                    + ysup[2] * w_tr[2]
                    + ysup[3] * w_tr[3]
                )
                _apply_generator(ysup, blk_ptr, blk_col, blk_mat, diff_blk, a2, b2)
                for j in range(dim):
                    b2[j] = b2[j] - diff_pref * s2 * ysup[j]
                coef = (dw * dw - dt) / (2.0 * sqrt_dt)
                for j in range(dim):
                    ynew[j] = (
                        yb[j]
                        + 0.5 * dt * (a1[j] + a2[j])
                        + b1[j] * dw
                        + (b2[j] - b1[j]) * coef
                    )
            else:
                for j in range(dim):
                    ynew[j] = yb[j] + dt * a1[j] + dw * b1[j]

            if renormalize:
                tr = ynew[0] + ynew[3]
                if abs(tr - 1.0) > 1e-10 and tr != 0:
                    inv = 1.0 / tr
                    for j in range(dim):
                        ynew[j] *= inv

            # positivity of the physical 2x2 block: Bloch shrink
            fro2 = 0.0
            for i in range(4):
                fro2 += ynew[i].real ** 2 + ynew[i].imag ** 2
            if project and np.isfinite(fro2):
                r2 = 2.0 * fro2 - 1.0
                if r2 > 1.0 + 1e-12:
                    shrink = 1.0 / np.sqrt(r2)
                    ynew[0] = 0.5 + (ynew[0] - 0.5) * shrink
                    ynew[1] = ynew[1] * shrink
                    ynew[2] = ynew[2] * shrink
                    ynew[3] = 0.5 + (ynew[3] - 0.5) * shrink
                    fro2 = min(fro2, 1.0)

            # divergence: non-finite anywhere, or physical trace norm > cap
            rowsq = 0.0
            for j in range(dim):
                rowsq += ynew[j].real ** 2 + ynew[j].imag ** 2
            bad = not np.isfinite(rowsq)
            if not bad and fro2 > fro_gate:
                # exact trace norm of the Hermitian part of the 2x2 block
                a_d = ynew[0].real
                d_d = ynew[3].real
                od = 0.5 * (ynew[1] + np.conj(ynew[2]))
                half_tr = 0.5 * (a_d + d_d)
                disc = np.sqrt(max(0.25 * (a_d - d_d) ** 2 + abs(od) ** 2, 0.0))
                if abs(half_tr + disc) + abs(half_tr - disc) > div_threshold:
                    bad = True
            if bad:
                diverged[b] = True
                div_time[b] = t_origin + (gstep + 1) * dt
                continue
            for j in range(dim):
                yb[j] = ynew[j]

            if (gstep + 1) % record_stride == 0:
                s_idx = (gstep + 1) // record_stride - 1
                if rec_const != 0.0:
                    currents[b, s_idx] = cur_acc[b] / record_stride
                cur_acc[b] = 0.0
                tr_dev = abs(yb[0] + yb[3] - 1.0)
                if tr_dev > trace_dev_max[b]:
                    trace_dev_max[b] = tr_dev
                herm = max(
                    abs(yb[0] - np.conj(yb[0])),
                    abs(yb[3] - np.conj(yb[3])),
                    abs(yb[1] - np.conj(yb[2])),
                )
                if herm > herm_defect_max[b]:
                    herm_defect_max[b] = herm
                pur = 0.0
                for i in range(4):
                    pur += yb[i].real ** 2 + yb[i].imag ** 2
                if pur > purity_max[b]:
                    purity_max[b] = pur
                for oi in range(n_obs):
                    val = 0.0
                    for i in range(4):
                        val += (yb[i] * obs_w[oi, i]).real
                    obs_out[oi, b, s_idx] = val
