"""Compiled fast path for the style-sequence likelihood.

The exact-likelihood objective spends nearly all its time in the per-step
chain conditioner -> flow-layer inverses -> Gaussian score -> recurrent
cell.  This module fuses that whole chain into one autodiff primitive with
a hand-derived backward pass (reverse sweep over time with saved
activations), compiled with numba when available.

The tape-composed implementation in ``transition``/``training`` remains the
reference; tests assert that values and every parameter gradient agree to
near machine precision, and the fused path is disabled automatically when
numba is missing.
"""

from __future__ import annotations

import numpy as np

from flowident import autodiff as ad

try:
    import math

    import numba
    from numba import njit

    HAVE_FASTPATH = True
except Exception:  # pragma: no cover
    HAVE_FASTPATH = False


LOG_2PI = float(np.log(2.0 * np.pi))


if HAVE_FASTPATH:

    @njit(cache=True, inline="always")
    def _sp(x):  # softplus
        if x > 30.0:
            return x
        if x < -30.0:
            return math.exp(x)
        return math.log1p(math.exp(x))

    @njit(cache=True, inline="always")
    def _sig(x):
        if x >= 0.0:
            return 1.0 / (1.0 + math.exp(-x))
        e = math.exp(x)
        return e / (1.0 + e)

    @njit(cache=True, inline="always")
    def _log_sp(x):  # log softplus(x)
        if x < -30.0:
            return x
        v = _sp(x)
        return math.log(v)

    @njit(cache=True)
    def _layer_solve_scalar(y, raw, off, k_width, tol, width_tol, max_iter, out_pair, scr):
        """Solve one scalar layer inverse; fills out_pair = (x, dlog).

        raw[off : off + 3*k] holds (a_hat, b_off, w_hat) for this component;
        scr is a (5, K) scratch buffer for the constrained parameters.
        Returns False when no bracket exists within |x| <= 50.
        """
        st = _sig(y)
        tol_i = tol * st * (1.0 - st)
        floor = 2.5e-16 * max(st, 1.0 - st)
        if tol_i < floor:
            tol_i = floor
        wmax = -1e300
        for k in range(k_width):
            wv = raw[off + 2 * k_width + k]
            if wv > wmax:
                wmax = wv
        zsum = 0.0
        for k in range(k_width):
            zsum += math.exp(raw[off + 2 * k_width + k] - wmax)
        log_norm = wmax + math.log(zsum)
        for k in range(k_width):
            a_hat = raw[off + k]
            scr[0, k] = _sp(a_hat)  # a
            scr[1, k] = raw[off + k_width + k]  # b
            scr[3, k] = raw[off + 2 * k_width + k] - log_norm  # log w
            scr[2, k] = math.exp(scr[3, k])  # w
            scr[4, k] = _log_sp(a_hat)  # log a

        lo = -8.0
        hi = 8.0
        ok_lo = False
        ok_hi = False
        for _ in range(9):
            s_lo = 0.0
            s_hi = 0.0
            for k in range(k_width):
                s_lo += scr[2, k] * _sig(scr[0, k] * lo + scr[1, k])
                s_hi += scr[2, k] * _sig(scr[0, k] * hi + scr[1, k])
            ok_lo = s_lo <= st
            ok_hi = s_hi >= st
            if ok_lo and ok_hi:
                break
            if not ok_lo:
                lo = max(lo * 2.0, -50.0)
            if not ok_hi:
                hi = min(hi * 2.0, 50.0)
        if not (ok_lo and ok_hi):
            return False
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            s_mid = 0.0
            for k in range(k_width):
                s_mid += scr[2, k] * _sig(scr[0, k] * mid + scr[1, k])
            err = s_mid - st
            if err <= tol_i and -err <= tol_i and hi - lo <= width_tol:
                lo = mid
                hi = mid
                break
            if err < 0.0:
                lo = mid
            else:
                hi = mid
        x = 0.5 * (lo + hi)

        # stable log-slope at the solution
        m_den = -1e300
        m_s = -1e300
        m_1ms = -1e300
        for k in range(k_width):
            u = scr[0, k] * x + scr[1, k]
            spp = _sp(u)
            spn = _sp(-u)
            t_den = scr[3, k] + scr[4, k] - spp - spn
            t_s = scr[3, k] - spn
            t_1 = scr[3, k] - spp
            if t_den > m_den:
                m_den = t_den
            if t_s > m_s:
                m_s = t_s
            if t_1 > m_1ms:
                m_1ms = t_1
        s_den = 0.0
        s_s = 0.0
        s_1 = 0.0
        for k in range(k_width):
            u = scr[0, k] * x + scr[1, k]
            spp = _sp(u)
            spn = _sp(-u)
            s_den += math.exp(scr[3, k] + scr[4, k] - spp - spn - m_den)
            s_s += math.exp(scr[3, k] - spn - m_s)
            s_1 += math.exp(scr[3, k] - spp - m_1ms)
        log_den = m_den + math.log(s_den)
        log_s = m_s + math.log(s_s)
        log_1ms = m_1ms + math.log(s_1)
        out_pair[0] = x
        out_pair[1] = log_den - log_s - log_1ms
        return True

    @njit(cache=True)
    def _style_forward(
        zs, cw1, cb1, cw2, cb2, cw3, cb3, cell, is_gru, n, depth, k_width,
        tol, max_iter,
    ):
        """Forward sweep; returns (nll, h_all, eps, xs, gates, r1s, r2s, raws, ok)."""
        bsz, t_len, _ = zs.shape
        hdim = cell.shape[1]
        hc = cb1.shape[0]
        out_dim = cb3.shape[0]
        width_tol = max(1e-12, 10.0 * tol)
        cw1t = np.ascontiguousarray(cw1.T)
        cw2t = np.ascontiguousarray(cw2.T)
        cw3t = np.ascontiguousarray(cw3.T)
        wut = np.ascontiguousarray(cell[0, :, :n].T)
        vut = np.ascontiguousarray(cell[1, :, :hdim].T)
        wrt = np.ascontiguousarray(cell[3, :, :n].T)
        vrt = np.ascontiguousarray(cell[4, :, :hdim].T)
        wct = np.ascontiguousarray(cell[6, :, :n].T)
        vct = np.ascontiguousarray(cell[7, :, :hdim].T)

        nll = np.zeros(bsz)
        h_all = np.zeros((bsz, t_len + 1, hdim))
        eps = np.zeros((bsz, t_len, n))
        xs = np.zeros((bsz, t_len, depth + 1, n))
        gates = np.zeros((bsz, t_len, 3, hdim))
        r1s = np.zeros((bsz, t_len, hc))
        r2s = np.zeros((bsz, t_len, hc))
        raws = np.zeros((bsz, t_len, out_dim))
        pair = np.zeros(2)
        scr = np.zeros((5, k_width))
        ok = True

        h = np.zeros((bsz, hdim))
        for t in range(t_len):
            a1 = np.dot(h, cw1t)
            for bi in range(bsz):
                for j in range(hc):
                    a1[bi, j] = math.tanh(a1[bi, j] + cb1[j])
            a2 = np.dot(a1, cw2t)
            for bi in range(bsz):
                for j in range(hc):
                    a2[bi, j] = math.tanh(a2[bi, j] + cb2[j])
            raw = np.dot(a2, cw3t)
            for bi in range(bsz):
                for j in range(out_dim):
                    raw[bi, j] += cb3[j]
            r1s[:, t] = a1
            r2s[:, t] = a2
            raws[:, t] = raw

            for bi in range(bsz):
                for i in range(n):
                    xs[bi, t, depth, i] = zs[bi, t, i]
            for d in range(depth - 1, -1, -1):
                for bi in range(bsz):
                    for i in range(n):
                        off = d * (n * 3 * k_width) + i * (3 * k_width)
                        good = _layer_solve_scalar(
                            xs[bi, t, d + 1, i], raws[bi, t], off, k_width,
                            tol, width_tol, max_iter, pair, scr,
                        )
                        if not good:
                            ok = False
                            return (
                                nll, h_all, eps, xs, gates, r1s, r2s, raws, ok,
                            )
                        xs[bi, t, d, i] = pair[0]
                        nll[bi] += pair[1]
            for bi in range(bsz):
                acc = 0.0
                for i in range(n):
                    e = xs[bi, t, 0, i]
                    eps[bi, t, i] = e
                    acc += e * e
                nll[bi] += 0.5 * acc + 0.5 * n * LOG_2PI

            et = eps[:, t].copy()
            if is_gru:
                au = np.dot(et, wut) + np.dot(h, vut)
                ar = np.dot(et, wrt) + np.dot(h, vrt)
                for bi in range(bsz):
                    for j in range(hdim):
                        au[bi, j] = _sig(au[bi, j] + cell[2, j, 0])
                        ar[bi, j] = _sig(ar[bi, j] + cell[5, j, 0])
                rh = ar * h
                ac = np.dot(et, wct) + np.dot(rh, vct)
                hn = np.zeros((bsz, hdim))
                for bi in range(bsz):
                    for j in range(hdim):
                        cc = math.tanh(ac[bi, j] + cell[8, j, 0])
                        gates[bi, t, 0, j] = au[bi, j]
                        gates[bi, t, 1, j] = ar[bi, j]
                        gates[bi, t, 2, j] = cc
                        hn[bi, j] = (1.0 - au[bi, j]) * h[bi, j] + au[bi, j] * cc
                h = hn
            else:
                ac = np.dot(et, wut) + np.dot(h, vut)
                hn = np.zeros((bsz, hdim))
                for bi in range(bsz):
                    for j in range(hdim):
                        cc = math.tanh(ac[bi, j] + cell[2, j, 0])
                        gates[bi, t, 2, j] = cc
                        hn[bi, j] = cc
                h = hn
            h_all[:, t + 1] = h
        return nll, h_all, eps, xs, gates, r1s, r2s, raws, ok

    @njit(cache=True)
    def _layer_backward_scalar(y, x, raw, off, k_width, gx, gd, grads_raw, scr):
        """Backward of one scalar layer inverse.

        gx flows into the solved x, gd into the log-slope; accumulates the
        packed parameter gradients into grads_raw and returns the gradient
        with respect to y.  scr is an (8, K) scratch buffer.
        """
        wmax = -1e300
        for k in range(k_width):
            wv = raw[off + 2 * k_width + k]
            if wv > wmax:
                wmax = wv
        zsum = 0.0
        for k in range(k_width):
            zsum += math.exp(raw[off + 2 * k_width + k] - wmax)
        log_norm = wmax + math.log(zsum)

        m_den = -1e300
        m_s = -1e300
        m_1ms = -1e300
        for k in range(k_width):
            a_hat = raw[off + k]
            a = _sp(a_hat)
            u = a * x + raw[off + k_width + k]
            spp = _sp(u)
            spn = _sp(-u)
            lw = raw[off + 2 * k_width + k] - log_norm
            la = _log_sp(a_hat)
            scr[0, k] = a
            scr[1, k] = lw
            scr[2, k] = la
            scr[3, k] = spp
            scr[4, k] = spn
            scr[5, k] = _sig(u)
            scr[6, k] = _sig(a_hat)  # softplus chain factor
            scr[7, k] = math.exp(lw)  # w
            td = lw + la - spp - spn
            ts = lw - spn
            t1 = lw - spp
            if td > m_den:
                m_den = td
            if ts > m_s:
                m_s = ts
            if t1 > m_1ms:
                m_1ms = t1
        sd = 0.0
        ss = 0.0
        s1 = 0.0
        for k in range(k_width):
            sd += math.exp(scr[1, k] + scr[2, k] - scr[3, k] - scr[4, k] - m_den)
            ss += math.exp(scr[1, k] - scr[4, k] - m_s)
            s1 += math.exp(scr[1, k] - scr[3, k] - m_1ms)
        log_den = m_den + math.log(sd)
        log_s = m_s + math.log(ss)
        log_1ms = m_1ms + math.log(s1)

        dl_dx = 0.0
        g_y_coef = math.exp(log_s + log_1ms - log_den)  # dx/dy
        for k in range(k_width):
            lsp = -scr[3, k] - scr[4, k]
            r1 = math.exp(scr[1, k] + scr[2, k] + lsp - log_den)
            s1k = math.exp(scr[1, k] + lsp - log_1ms)
            s2k = math.exp(scr[1, k] + lsp - log_s)
            du = r1 * (1.0 - 2.0 * scr[5, k]) + (s1k - s2k)
            dl_dx += scr[0, k] * du
        g_eff = gx + gd * dl_dx
        g_y = g_eff * g_y_coef

        gw_dot = 0.0
        for k in range(k_width):
            lsp = -scr[3, k] - scr[4, k]
            r1 = math.exp(scr[1, k] + scr[2, k] + lsp - log_den)
            r0 = math.exp(scr[1, k] + lsp - log_den)
            s1k = math.exp(scr[1, k] + lsp - log_1ms)
            s2k = math.exp(scr[1, k] + lsp - log_s)
            du = r1 * (1.0 - 2.0 * scr[5, k]) + (s1k - s2k)
            dl_da = x * du + r0
            dl_db = du
            dl_dw = (
                math.exp(scr[2, k] + lsp - log_den)
                + math.exp(-scr[4, k] - log_1ms)
                - math.exp(-scr[4, k] - log_s)
            )
            dx_da = -r0 * x
            dx_db = -r0
            dx_dw = -math.exp(-scr[4, k] - log_den)
            g_ac = g_eff * dx_da + gd * dl_da
            g_bc = g_eff * dx_db + gd * dl_db
            g_wc = g_eff * dx_dw + gd * dl_dw
            grads_raw[off + k] += g_ac * scr[6, k]
            grads_raw[off + k_width + k] += g_bc
            grads_raw[off + 2 * k_width + k] += g_wc * scr[7, k]
            gw_dot += g_wc * scr[7, k]
        for k in range(k_width):
            grads_raw[off + 2 * k_width + k] -= scr[7, k] * gw_dot
        return g_y

    @njit(cache=True)
    def _style_backward(
        g_up, zs, cw1, cb1, cw2, cb2, cw3, cb3, cell, is_gru, n, depth,
        k_width, h_all, eps, xs, gates, r1s, r2s, raws,
    ):
        bsz, t_len, _ = zs.shape
        hdim = cell.shape[1]
        hc = cb1.shape[0]
        out_dim = cb3.shape[0]
        wu = np.ascontiguousarray(cell[0, :, :n])
        vu = np.ascontiguousarray(cell[1, :, :hdim])
        wr = np.ascontiguousarray(cell[3, :, :n])
        vr = np.ascontiguousarray(cell[4, :, :hdim])
        wc = np.ascontiguousarray(cell[6, :, :n])
        vc = np.ascontiguousarray(cell[7, :, :hdim])

        g_zs = np.zeros_like(zs)
        g_cw1 = np.zeros_like(cw1)
        g_cb1 = np.zeros_like(cb1)
        g_cw2 = np.zeros_like(cw2)
        g_cb2 = np.zeros_like(cb2)
        g_cw3 = np.zeros_like(cw3)
        g_cb3 = np.zeros_like(cb3)
        g_cell = np.zeros_like(cell)

        g_h = np.zeros((bsz, hdim))
        scr = np.zeros((8, k_width))
        for t in range(t_len - 1, -1, -1):
            g_eps = np.zeros((bsz, n))
            h_prev = h_all[:, t].copy()
            et = eps[:, t].copy()
            if is_gru:
                u = gates[:, t, 0].copy()
                r = gates[:, t, 1].copy()
                c = gates[:, t, 2].copy()
                g_u = g_h * (c - h_prev)
                g_c = g_h * u
                g_hprev = g_h * (1.0 - u)
                g_ac = g_c * (1.0 - c * c)
                g_eps += np.dot(g_ac, wc)
                g_rh = np.dot(g_ac, vc)
                rh = r * h_prev
                g_cell[6, :, :n] += np.dot(np.ascontiguousarray(g_ac.T), et)
                g_cell[7, :, :hdim] += np.dot(np.ascontiguousarray(g_ac.T), rh)
                for j in range(hdim):
                    s = 0.0
                    for bi in range(bsz):
                        s += g_ac[bi, j]
                    g_cell[8, j, 0] += s
                g_r = g_rh * h_prev
                g_hprev += g_rh * r
                g_ar = g_r * r * (1.0 - r)
                g_eps += np.dot(g_ar, wr)
                g_hprev += np.dot(g_ar, vr)
                g_cell[3, :, :n] += np.dot(np.ascontiguousarray(g_ar.T), et)
                g_cell[4, :, :hdim] += np.dot(np.ascontiguousarray(g_ar.T), h_prev)
                for j in range(hdim):
                    s = 0.0
                    for bi in range(bsz):
                        s += g_ar[bi, j]
                    g_cell[5, j, 0] += s
                g_au = g_u * u * (1.0 - u)
                g_eps += np.dot(g_au, wu)
                g_hprev += np.dot(g_au, vu)
                g_cell[0, :, :n] += np.dot(np.ascontiguousarray(g_au.T), et)
                g_cell[1, :, :hdim] += np.dot(np.ascontiguousarray(g_au.T), h_prev)
                for j in range(hdim):
                    s = 0.0
                    for bi in range(bsz):
                        s += g_au[bi, j]
                    g_cell[2, j, 0] += s
            else:
                c = gates[:, t, 2].copy()
                g_ac = g_h * (1.0 - c * c)
                g_eps += np.dot(g_ac, wu)
                g_hprev = np.dot(g_ac, vu)
                g_cell[0, :, :n] += np.dot(np.ascontiguousarray(g_ac.T), et)
                g_cell[1, :, :hdim] += np.dot(np.ascontiguousarray(g_ac.T), h_prev)
                for j in range(hdim):
                    s = 0.0
                    for bi in range(bsz):
                        s += g_ac[bi, j]
                    g_cell[2, j, 0] += s

            # gaussian score on eps
            for bi in range(bsz):
                for i in range(n):
                    g_eps[bi, i] += g_up[bi] * eps[bi, t, i]

            # flow layers, walked forward (reverse of the inverse order)
            g_raw = np.zeros((bsz, out_dim))
            for bi in range(bsz):
                gx_row = np.zeros(n)
                for i in range(n):
                    gx_row[i] = g_eps[bi, i]
                for d in range(depth):
                    for i in range(n):
                        off = d * (n * 3 * k_width) + i * (3 * k_width)
                        gy = _layer_backward_scalar(
                            xs[bi, t, d + 1, i], xs[bi, t, d, i], raws[bi, t],
                            off, k_width, gx_row[i], g_up[bi], g_raw[bi], scr,
                        )
                        gx_row[i] = gy
                for i in range(n):
                    g_zs[bi, t, i] = gx_row[i]

            # conditioner backward
            r1 = r1s[:, t].copy()
            r2 = r2s[:, t].copy()
            g_r2 = np.dot(g_raw, cw3)
            g_cw3 += np.dot(np.ascontiguousarray(g_raw.T), r2)
            for j in range(out_dim):
                s = 0.0
                for bi in range(bsz):
                    s += g_raw[bi, j]
                g_cb3[j] += s
            g_a2 = g_r2 * (1.0 - r2 * r2)
            g_r1 = np.dot(g_a2, cw2)
            g_cw2 += np.dot(np.ascontiguousarray(g_a2.T), r1)
            for j in range(hc):
                s2 = 0.0
                for bi in range(bsz):
                    s2 += g_a2[bi, j]
                g_cb2[j] += s2
            g_a1 = g_r1 * (1.0 - r1 * r1)
            g_hprev += np.dot(g_a1, cw1)
            g_cw1 += np.dot(np.ascontiguousarray(g_a1.T), h_prev)
            for j in range(hc):
                s1 = 0.0
                for bi in range(bsz):
                    s1 += g_a1[bi, j]
                g_cb1[j] += s1

            g_h = g_hprev
        return g_zs, g_cw1, g_cb1, g_cw2, g_cb2, g_cw3, g_cb3, g_cell


def _pack_cell(cell_arrays, hdim):
    """Stack cell weight arrays into one (m, hdim, width) cube for numba."""
    width = max(a.shape[1] if a.ndim == 2 else 1 for a in cell_arrays)
    cube = np.zeros((len(cell_arrays), hdim, width))
    for i, a in enumerate(cell_arrays):
        if a.ndim == 2:
            cube[i, :, : a.shape[1]] = a
        else:
            cube[i, :, 0] = a
    return cube


def _style_nll_forward(values, meta):
    t_len, n, depth, k_width, hdim, is_gru, tol, max_iter = meta
    zs = values[0]
    cw1, cb1, cw2, cb2, cw3, cb3 = values[1:7]
    cell_arrays = values[7:]
    cube = _pack_cell(cell_arrays, hdim)
    out = _style_forward(
        zs, cw1, cb1, cw2, cb2, cw3, cb3, cube, is_gru, n, depth, k_width,
        tol, max_iter,
    )
    nll, h_all, eps, xs, gates, r1s, r2s, raws, ok = out
    if not ok:
        from flowident.transition import SaturationError

        raise SaturationError("flow inverse: no bracket within |x| <= 50")
    aux = (h_all, eps, xs, gates, r1s, r2s, raws, cube)
    return nll, aux


def _style_nll_vjp(g, values, out, meta, aux):
    t_len, n, depth, k_width, hdim, is_gru, tol, max_iter = meta
    zs = values[0]
    cw1, cb1, cw2, cb2, cw3, cb3 = values[1:7]
    cell_arrays = values[7:]
    h_all, eps, xs, gates, r1s, r2s, raws, cube = aux
    res = _style_backward(
        g, zs, cw1, cb1, cw2, cb2, cw3, cb3, cube, is_gru, n, depth, k_width,
        h_all, eps, xs, gates, r1s, r2s, raws,
    )
    g_zs, g_cw1, g_cb1, g_cw2, g_cb2, g_cw3, g_cb3, g_cube = res
    cell_grads = []
    for i, a in enumerate(cell_arrays):
        if a.ndim == 2:
            cell_grads.append(g_cube[i, :, : a.shape[1]].copy())
        else:
            cell_grads.append(g_cube[i, :, 0].copy())
    return (g_zs, g_cw1, g_cb1, g_cw2, g_cb2, g_cw3, g_cb3, *cell_grads)


if HAVE_FASTPATH:
    ad.register_primitive("style_seq_nll", _style_nll_forward, _style_nll_vjp, with_aux=True)


def style_seq_nll(zs, flow, cell, cell_tensors, cond_tensors, tol=1e-10):
    """Per-window style NLL as a single fused node.

    zs (B, T, n) Tensor; cond_tensors/cell_tensors are the lifted parameter
    Tensors in declaration order.
    """
    from flowident import transition as tr

    is_gru = 1 if isinstance(cell, tr.GRUCellParams) else 0
    t_len = zs.shape[1]
    meta = (
        t_len,
        flow.n_s,
        flow.depth,
        flow.width,
        cell.hidden_dim,
        is_gru,
        float(tol),
        80,
    )
    inputs = (zs, *cond_tensors, *cell_tensors)
    return ad.apply_primitive("style_seq_nll", inputs, meta)
