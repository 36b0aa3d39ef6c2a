"""Compiled per-path loops: GBM generation, payoff evaluation and control integrals.

Controls enter as level tables (see strategy.LevelControl): a continuous part on a
uniform grid [lo, hi] and a jump to 1 at jump_level. Payoffs and single-player values
enter as (kind, strike, threshold, coefficient, exponent) with kind 0 = zero,
1 = call, 2 = put.
"""
from __future__ import annotations

import math

from numba import njit

from .rng import STREAM_PATH, STREAM_REFINE, box_muller, uniforms4


@njit(cache=True)
def generate_block(y, m, k_start, drift, vol, h, substeps, seed, path_ids, stop_log, stop_every, bridge, X, S, last):
    """Advance paths by X.shape[1] output steps after step k_start.

    y and m hold log X and log running max and are updated in place. Fine steps have
    length h; every `substeps` of them form one output step, and fine step f always
    uses the same counter-based draws, so runs that share the fine grid share paths.
    With `bridge` the running maximum includes the exact Brownian-bridge maximum of
    log X within every fine step, otherwise only output-grid states count. A path
    stops evolving once its running maximum reaches exp(stop_log), checked at steps
    that are multiples of stop_every: last[i] < 0 marks paths still running and is set
    to the stopping step.
    """
    sqh = math.sqrt(h)
    var_h = vol * vol * h
    step_mean = drift * h
    n_block = X.shape[1]
    for i in range(path_ids.size):
        pid = path_ids[i]
        yi = y[i]
        mi = m[i]
        done = last[i] >= 0
        cur_pair = -1
        za = 0.0
        zb = 0.0
        va = 0.5
        vb = 0.5
        for col in range(n_block):
            k = k_start + col + 1
            if done:
                X[i, col] = math.exp(yi)
                S[i, col] = math.exp(mi)
                continue
            for j in range(substeps):
                f = (k - 1) * substeps + j
                pair = f >> 1
                if pair != cur_pair:
                    u1, u2, u3, u4 = uniforms4(seed, pid, pair, STREAM_PATH)
                    za, zb = box_muller(u1, u2)
                    va = u3
                    vb = u4
                    cur_pair = pair
                if f & 1:
                    z = zb
                    v = vb
                else:
                    z = za
                    v = va
                y1 = yi + step_mean + vol * sqh * z
                if bridge:
                    d = y1 - yi
                    mx = 0.5 * (yi + y1 + math.sqrt(d * d - 2.0 * var_h * math.log(v)))
                    if mx > mi:
                        mi = mx
                yi = y1
            if not bridge and yi > mi:
                mi = yi
            X[i, col] = math.exp(yi)
            S[i, col] = math.exp(mi)
            if mi >= stop_log and k % stop_every == 0:
                done = True
                last[i] = k
        y[i] = yi
        m[i] = mi


@njit(cache=True, inline="always")
def _payoff(kind, strike, s):
    if kind == 1:
        return s - strike if s > strike else 0.0
    if kind == 2:
        return strike - s if s < strike else 0.0
    return 0.0


@njit(cache=True, inline="always")
def _value(kind, strike, thr, coef, expo, s):
    if kind == 1:
        if s < thr:
            return (thr - strike) * (s / thr) ** expo
        return s - strike
    if kind == 2:
        if s > thr:
            return (strike - thr) * (s / thr) ** expo
        return strike - s
    return 0.0


@njit(cache=True, inline="always")
def _phi(lo, hi, vals, s):
    """Continuous part of a level control at level s."""
    n = vals.size
    if n == 1 or hi <= lo or s <= lo:
        return vals[0]
    t = (s - lo) * (n - 1) / (hi - lo)
    k = int(t)
    if k >= n - 1:
        return vals[n - 1]
    w = t - k
    return vals[k] * (1.0 - w) + vals[k + 1] * w


@njit(cache=True, inline="always")
def _ctrl(lo, hi, vals, jump, s):
    if s >= jump:
        return 1.0
    return _phi(lo, hi, vals, s)


@njit(cache=True, inline="always")
def _left(lo, hi, vals, jump, s):
    """Control just below level s (continuous part at s when s is the jump level)."""
    if s > jump:
        return 1.0
    return _phi(lo, hi, vals, s)


@njit(cache=True, inline="always")
def _bridge_hit_time(h, y0, y1, level_log, vol, z, u):
    """Time, within a step of length h, at which a Brownian bridge from y0 to y1 first reaches level_log.

    Sampled conditionally on the level being reached, from one normal z and one uniform u.
    The time change s = h t / (h - t) turns the bridge into a Brownian motion hitting a
    moving line, whose conditional passage time is inverse Gaussian.
    """
    a = level_log - y0
    if a <= 0.0:
        return 0.0
    shape = a * a / (vol * vol)
    gap = abs(a - (y1 - y0))
    yy = z * z
    if gap <= 0.0:
        s = shape / yy if yy > 0.0 else math.inf
    else:
        mean = a * h / gap
        q = mean * yy / (2.0 * shape)
        x = mean / (1.0 + q + math.sqrt(q * q + 2.0 * q))
        s = x if u <= mean / (mean + x) else mean * mean / x
    if not s < math.inf:
        return h
    return h * s / (h + s)


@njit(cache=True, inline="always")
def _refine_draws(seed, pid, k):
    u1, u2, u3, u4 = uniforms4(seed, pid, k, STREAM_REFINE)
    z, _ = box_muller(u1, u2)
    return z, u3


@njit(cache=True, inline="always")
def _hit_disc(r, dt, k, y0, y1, level, vol, z, u):
    """Discount factor at the first passage to `level` inside output step k (log states y0 -> y1)."""
    t = _bridge_hit_time(dt, y0, y1, math.log(level), vol, z, u)
    return math.exp(-r * ((k - 1) * dt + t))


@njit(cache=True)
def _phi_inverse(lo, hi, vals, u, a, b):
    """Smallest level in [a, b] where the continuous part exceeds u (phi(a) <= u < phi(b))."""
    for _ in range(100):
        mid = 0.5 * (a + b)
        if mid <= a or mid >= b:
            break
        if _phi(lo, hi, vals, mid) > u:
            b = mid
        else:
            a = mid
    return b


@njit(cache=True)
def _stop(Srow, last, bridge, lo, hi, vals, jump, u):
    """Level and output step at which the randomized stop with device u fires (step -1: never)."""
    x0 = Srow[0]
    if _ctrl(lo, hi, vals, jump, x0) > u:
        return x0, 0
    s = x0
    for k in range(1, last + 1):
        sk = Srow[k]
        if sk <= s:
            continue
        if bridge:
            cap = sk if sk < jump else jump
            p_cap = _phi(lo, hi, vals, cap)
            if p_cap > u:
                return _phi_inverse(lo, hi, vals, u, s, cap), k
            if sk >= jump:
                return jump, k
        else:
            if _ctrl(lo, hi, vals, jump, sk) > u:
                return sk, k
        s = sk
    return math.inf, -1


@njit(cache=True)
def evaluate_payoffs(
    X, S, last, dt, bridge, r, vol, seed, path_ids, p1, p2, dlevel,
    lo1, hi1, v1, jump1,
    lo2, hi2, v2, jump2,
    g1, g2, vh1, vh2,
    draws, out,
):
    """Per-path payoff samples: out[:, 0] J1 formula, 1 J2 formula, 2 J1 indicator, 3 J2 indicator.

    g1, g2 are (kind, strike) arrays; vh1, vh2 are (kind, strike, threshold,
    coefficient, exponent). draws[:, 0:2] are the devices U1, U2 and draws[:, 2:4]
    decide competition for players 1 and 2. In bridge mode an event at level L inside
    step k is discounted at a sampled first-passage time of the bridge between X[k-1]
    and X[k]; in grid mode it happens at the grid time k dt. Level integrals use
    composite trapezoids with sub-intervals no wider than dlevel.
    """
    gk1 = int(g1[0])
    gs1 = g1[1]
    gk2 = int(g2[0])
    gs2 = g2[1]
    hk1 = int(vh1[0])
    hk2 = int(vh2[0])
    for i in range(S.shape[0]):
        Srow = S[i]
        Xrow = X[i]
        pid = path_ids[i]
        n_last = last[i]
        x0 = Srow[0]
        # ---- formula estimator ----
        a1 = _ctrl(lo1, hi1, v1, jump1, x0)
        a2 = _ctrl(lo2, hi2, v2, jump2, x0)
        vh1_x0 = _value(hk1, vh1[1], vh1[2], vh1[3], vh1[4], x0)
        vh2_x0 = _value(hk2, vh2[1], vh2[2], vh2[3], vh2[4], x0)
        J1 = a1 * ((1.0 - p1 * a2) * _payoff(gk1, gs1, x0) + p1 * vh1_x0 * a2)
        J2 = a2 * _payoff(gk2, gs2, x0)
        C2 = vh1_x0 * a2
        C1 = vh2_x0 * a1
        G1 = a1
        G2 = a2
        s = x0
        for k in range(1, n_last + 1):
            sk = Srow[k]
            if sk <= s:
                continue
            if G1 >= 1.0 and G2 >= 1.0:
                break
            if bridge:
                z, u = _refine_draws(seed, pid, k)
                y0 = math.log(Xrow[k - 1])
                y1 = math.log(Xrow[k])
                lo = s
                disc_lo = _hit_disc(r, dt, k, y0, y1, lo, vol, z, u)
                while lo < sk:
                    hi = sk
                    if jump1 > lo and jump1 < hi:
                        hi = jump1
                    if jump2 > lo and jump2 < hi:
                        hi = jump2
                    # composite trapezoid in level over the jump-free segment (lo, hi]
                    m = int((hi - lo) / dlevel) + 1
                    if m > 4096:
                        m = 4096
                    a_lv = lo
                    c1hi = G1
                    c2hi = G2
                    disc_hi = disc_lo
                    for j in range(1, m + 1):
                        b_lv = hi if j == m else lo + (hi - lo) * j / m
                        disc_b = _hit_disc(r, dt, k, y0, y1, b_lv, vol, z, u)
                        c1lo = c1hi
                        c2lo = c2hi
                        c1hi = _left(lo1, hi1, v1, jump1, b_lv)
                        c2hi = _left(lo2, hi2, v2, jump2, b_lv)
                        d1 = c1hi - c1lo
                        d2 = c2hi - c2lo
                        if d1 > 0.0 or d2 > 0.0:
                            dC2 = 0.5 * (disc_hi * _value(hk1, vh1[1], vh1[2], vh1[3], vh1[4], a_lv)
                                         + disc_b * _value(hk1, vh1[1], vh1[2], vh1[3], vh1[4], b_lv)) * d2
                            dC1 = 0.5 * (disc_hi * _value(hk2, vh2[1], vh2[2], vh2[3], vh2[4], a_lv)
                                         + disc_b * _value(hk2, vh2[1], vh2[2], vh2[3], vh2[4], b_lv)) * d1
                            f1lo = disc_hi * (1.0 - p1 * c2lo) * _payoff(gk1, gs1, a_lv) + p1 * C2
                            f1hi = disc_b * (1.0 - p1 * c2hi) * _payoff(gk1, gs1, b_lv) + p1 * (C2 + dC2)
                            f2lo = disc_hi * (1.0 - p2 * c1lo) * _payoff(gk2, gs2, a_lv) + p2 * C1
                            f2hi = disc_b * (1.0 - p2 * c1hi) * _payoff(gk2, gs2, b_lv) + p2 * (C1 + dC1)
                            J1 += d1 * 0.5 * (f1lo + f1hi)
                            J2 += d2 * 0.5 * (f2lo + f2hi)
                            C1 += dC1
                            C2 += dC2
                        a_lv = b_lv
                        disc_hi = disc_b
                    G1 = c1hi
                    G2 = c2hi
                    j1 = 0.0
                    j2 = 0.0
                    if hi == jump1 and G1 < 1.0:
                        j1 = 1.0 - G1
                    if hi == jump2 and G2 < 1.0:
                        j2 = 1.0 - G2
                    if j1 > 0.0 or j2 > 0.0:
                        vh1_hi = disc_hi * _value(hk1, vh1[1], vh1[2], vh1[3], vh1[4], hi)
                        vh2_hi = disc_hi * _value(hk2, vh2[1], vh2[2], vh2[3], vh2[4], hi)
                        f1 = disc_hi * (1.0 - p1 * (G2 + j2)) * _payoff(gk1, gs1, hi) + p1 * (C2 + vh1_hi * j2)
                        f2 = disc_hi * (1.0 - p2 * G1) * _payoff(gk2, gs2, hi) + p2 * C1
                        J1 += j1 * f1
                        J2 += j2 * f2
                        C2 += vh1_hi * j2
                        C1 += vh2_hi * j1
                        G1 += j1
                        G2 += j2
                    lo = hi
                    disc_lo = disc_hi
            else:
                disc = math.exp(-r * k * dt)
                n1 = _ctrl(lo1, hi1, v1, jump1, sk)
                n2 = _ctrl(lo2, hi2, v2, jump2, sk)
                j1 = n1 - G1
                j2 = n2 - G2
                if j1 > 0.0 or j2 > 0.0:
                    vh1_s = _value(hk1, vh1[1], vh1[2], vh1[3], vh1[4], sk)
                    vh2_s = _value(hk2, vh2[1], vh2[2], vh2[3], vh2[4], sk)
                    f1 = disc * (1.0 - p1 * n2) * _payoff(gk1, gs1, sk) + p1 * (C2 + disc * vh1_s * j2)
                    f2 = disc * (1.0 - p2 * G1) * _payoff(gk2, gs2, sk) + p2 * C1
                    J1 += j1 * f1
                    J2 += j2 * f2
                    C2 += disc * vh1_s * j2
                    C1 += disc * vh2_s * j1
                    G1 = n1
                    G2 = n2
            s = sk
        J1 += (1.0 - G1) * p1 * C2
        J2 += (1.0 - G2) * p2 * C1
        out[i, 0] = J1
        out[i, 1] = J2
        # ---- indicator estimator ----
        l1, k1 = _stop(Srow, n_last, bridge, lo1, hi1, v1, jump1, draws[i, 0])
        l2, k2 = _stop(Srow, n_last, bridge, lo2, hi2, v2, jump2, draws[i, 1])
        d1 = _event_disc(r, dt, bridge, k1, Xrow, l1, vol, seed, pid)
        d2 = _event_disc(r, dt, bridge, k2, Xrow, l2, vol, seed, pid)
        theta1 = draws[i, 2] < p1
        theta2 = draws[i, 3] < p2
        # player 1 wins strictly before an existing opponent
        val = 0.0
        if k1 >= 0 and (not theta1 or k2 < 0 or l1 < l2):
            val = d1 * _payoff(gk1, gs1, l1)
        elif theta1 and k2 >= 0:
            val = d2 * _value(hk1, vh1[1], vh1[2], vh1[3], vh1[4], l2)
        out[i, 2] = val
        # player 2 wins ties
        val = 0.0
        if k2 >= 0 and (not theta2 or k1 < 0 or l2 <= l1):
            val = d2 * _payoff(gk2, gs2, l2)
        elif theta2 and k1 >= 0:
            val = d1 * _value(hk2, vh2[1], vh2[2], vh2[3], vh2[4], l1)
        out[i, 3] = val


@njit(cache=True, inline="always")
def _event_disc(r, dt, bridge, k, Xrow, level, vol, seed, pid):
    if k <= 0:
        return 1.0 if k == 0 else 0.0
    if not bridge:
        return math.exp(-r * k * dt)
    z, u = _refine_draws(seed, pid, k)
    return _hit_disc(r, dt, k, math.log(Xrow[k - 1]), math.log(Xrow[k]), level, vol, z, u)



@njit(cache=True)
def control_integrals(
    X, S, last, dt, bridge, r, vol, seed, path_ids, dlevel,
    lo, hi, vals, jump, vh, stop_level,
    G, C, at_stop,
):
    """Gamma_t and the running integral of e^{-rs} V^h(X_s) dGamma_s on the grid.

    G and C (shape like S) receive right-continuous values at grid times. at_stop[i]
    receives (tau, Gamma_{tau-}, Gamma_tau, C_{tau-}, C_tau, step of tau) for tau the
    first time the running maximum reaches stop_level (tau = inf and step -1 if never).
    Events are discounted exactly as in evaluate_payoffs; in grid mode the whole
    increment of a step happens at its right end.
    """
    hk = int(vh[0])
    width = S.shape[1]
    for i in range(S.shape[0]):
        Srow = S[i]
        Xrow = X[i]
        pid = path_ids[i]
        n_last = last[i]
        x0 = Srow[0]
        g = _ctrl(lo, hi, vals, jump, x0)
        c = g * _value(hk, vh[1], vh[2], vh[3], vh[4], x0)
        G[i, 0] = g
        C[i, 0] = c
        stopped = x0 >= stop_level
        if stopped:
            at_stop[i, 0] = 0.0
            at_stop[i, 1] = 0.0
            at_stop[i, 2] = g
            at_stop[i, 3] = 0.0
            at_stop[i, 4] = c
            at_stop[i, 5] = 0.0
        else:
            at_stop[i, 0] = math.inf
            at_stop[i, 1] = math.nan
            at_stop[i, 2] = math.nan
            at_stop[i, 3] = math.nan
            at_stop[i, 4] = math.nan
            at_stop[i, 5] = -1.0
        s = x0
        for k in range(1, width):
            sk = Srow[k] if k <= n_last else s
            if sk > s and not bridge:
                g_new = _ctrl(lo, hi, vals, jump, sk)
                g_left = g
                c_left = c
                if g_new > g:
                    c += math.exp(-r * k * dt) * _value(hk, vh[1], vh[2], vh[3], vh[4], sk) * (g_new - g)
                    g = g_new
                if not stopped and sk >= stop_level:
                    stopped = True
                    at_stop[i, 0] = k * dt
                    at_stop[i, 1] = g_left
                    at_stop[i, 2] = g
                    at_stop[i, 3] = c_left
                    at_stop[i, 4] = c
                    at_stop[i, 5] = k
            elif sk > s:
                z, u = _refine_draws(seed, pid, k)
                y0 = math.log(Xrow[k - 1])
                y1 = math.log(Xrow[k])
                disc_a = _hit_disc(r, dt, k, y0, y1, s, vol, z, u)
                a_lv = s
                while a_lv < sk:
                    top = sk
                    if jump > a_lv and jump < top:
                        top = jump
                    if not stopped and stop_level > a_lv and stop_level < top:
                        top = stop_level
                    m = int((top - a_lv) / dlevel) + 1
                    if m > 4096:
                        m = 4096
                    lv = a_lv
                    for j in range(1, m + 1):
                        b_lv = top if j == m else a_lv + (top - a_lv) * j / m
                        disc_b = _hit_disc(r, dt, k, y0, y1, b_lv, vol, z, u)
                        g_new = _left(lo, hi, vals, jump, b_lv)
                        if g_new > g:
                            c += 0.5 * (disc_a * _value(hk, vh[1], vh[2], vh[3], vh[4], lv)
                                        + disc_b * _value(hk, vh[1], vh[2], vh[3], vh[4], b_lv)) * (g_new - g)
                            g = g_new
                        lv = b_lv
                        disc_a = disc_b
                    hit_stop = not stopped and top >= stop_level
                    if hit_stop:
                        at_stop[i, 0] = (k - 1) * dt + _bridge_hit_time(
                            dt, y0, y1, math.log(stop_level), vol, z, u)
                        at_stop[i, 1] = g
                        at_stop[i, 3] = c
                        at_stop[i, 5] = k
                    if top >= jump and g < 1.0:
                        c += disc_a * _value(hk, vh[1], vh[2], vh[3], vh[4], top) * (1.0 - g)
                        g = 1.0
                    if hit_stop:
                        stopped = True
                        at_stop[i, 2] = g
                        at_stop[i, 4] = c
                    a_lv = top
            s = sk
            G[i, k] = g
            C[i, k] = c
