"""Compiled hot loops: nearest-point search and prefix-code stream decoding.

All kernels run single-threaded with default IEEE float semantics, so
results are bit-reproducible across runs and thread counts.  The
candidate-search arithmetic appears once per specialization (scalar,
planar, generic) with identical operation order; bit-for-bit agreement
between the batched error evaluator and the codec path is asserted by
the spot-check in the analysis module.  Decoder kernels report malformed
streams via integer status codes which callers turn into DecodeError;
0 is success.
"""

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_NO_TERMINATOR = 2
STATUS_OVERRUN = 3
STATUS_BAD_SYMBOL = 4
STATUS_TRAILING = 5
STATUS_BAD_PARAM = 6

# Candidate scores below are ||resid - c||^2 minus the shared ||resid||^2
# term; first-minimum over lexicographically ordered candidates breaks
# exact ties toward the smallest integer coordinates.  The scalar case
# uses the same two non-trivial scores in closed form.


@njit(cache=True, nogil=True)
def _nearest_d1(points, inv_t, mat_t, off_pts, off_sq, out):
    n = points.shape[0]
    inv00 = inv_t[0, 0]
    m00 = mat_t[0, 0]
    c_minus, c_plus = off_pts[0, 0], off_pts[2, 0]
    q_minus, q_plus = off_sq[0], off_sq[2]
    for i in range(n):
        x = points[i, 0]
        base = np.rint(x * inv00)
        r = x - base * m00
        s_minus = q_minus - 2.0 * r * c_minus
        s_plus = q_plus - 2.0 * r * c_plus
        off = 0
        if s_minus <= 0.0:
            off = -1
        elif s_plus < 0.0:
            off = 1
        out[i, 0] = np.int64(base) + off


@njit(cache=True, nogil=True)
def _nearest_d2(points, inv_t, mat_t, offsets, off_pts, off_sq, out):
    n = points.shape[0]
    i00, i10 = inv_t[0, 0], inv_t[1, 0]
    i01, i11 = inv_t[0, 1], inv_t[1, 1]
    m00, m10 = mat_t[0, 0], mat_t[1, 0]
    m01, m11 = mat_t[0, 1], mat_t[1, 1]
    for i in range(n):
        x0 = points[i, 0]
        x1 = points[i, 1]
        b0 = np.rint(x0 * i00 + x1 * i10)
        b1 = np.rint(x0 * i01 + x1 * i11)
        r0 = x0 - (b0 * m00 + b1 * m10)
        r1 = x1 - (b0 * m01 + b1 * m11)
        best_k = 0
        best_s = np.inf
        for k in range(9):
            s = off_sq[k]
            s -= 2.0 * r0 * off_pts[k, 0]
            s -= 2.0 * r1 * off_pts[k, 1]
            if s < best_s:
                best_s = s
                best_k = k
        out[i, 0] = np.int64(b0) + offsets[best_k, 0]
        out[i, 1] = np.int64(b1) + offsets[best_k, 1]


@njit(cache=True, nogil=True)
def _nearest_generic(points, inv_t, mat_t, offsets, off_pts, off_sq, out):
    n, dim = points.shape
    ncand = offsets.shape[0]
    base = np.empty(dim)
    resid = np.empty(dim)
    for i in range(n):
        for j in range(dim):
            acc = 0.0
            for l in range(dim):
                acc += points[i, l] * inv_t[l, j]
            base[j] = np.rint(acc)
        for j in range(dim):
            acc = 0.0
            for l in range(dim):
                acc += base[l] * mat_t[l, j]
            resid[j] = points[i, j] - acc
        best_k = 0
        best_s = np.inf
        for k in range(ncand):
            s = off_sq[k]
            for j in range(dim):
                s -= 2.0 * resid[j] * off_pts[k, j]
            if s < best_s:
                best_s = s
                best_k = k
        for j in range(dim):
            out[i, j] = np.int64(base[j]) + offsets[best_k, j]


def nearest_points(points, inv_t, mat_t, offsets, off_pts, off_sq, out):
    dim = points.shape[1]
    assert offsets.shape[0] == 3 ** dim
    if dim == 1:
        _nearest_d1(points, inv_t, mat_t, off_pts, off_sq, out)
    elif dim == 2:
        _nearest_d2(points, inv_t, mat_t, offsets, off_pts, off_sq, out)
    else:
        _nearest_generic(points, inv_t, mat_t, offsets, off_pts, off_sq, out)


@njit(cache=True, nogil=True)
def apply_matrix_t(x, mat_t, out):
    """out = x @ mat_t with a fixed left-to-right summation order."""
    n, dim = x.shape
    cols = mat_t.shape[1]
    for i in range(n):
        for j in range(cols):
            acc = 0.0
            for l in range(dim):
                acc += x[i, l] * mat_t[l, j]
            out[i, j] = acc


@njit(cache=True, nogil=True)
def _error_stats_d1(u, blocks, h_pad, m, mult, nu_hat, inv_t, mat_t,
                    off_pts, off_sq, sum_eps, sum_sq, energies):
    num_blocks = blocks.shape[0]
    inv00 = inv_t[0, 0]
    m00 = mat_t[0, 0]
    c_minus, c_plus = off_pts[0, 0], off_pts[2, 0]
    q_minus, q_plus = off_sq[0], off_sq[2]
    for t in range(energies.size):
        acc_energy = 0.0
        for b in range(num_blocks):
            if b >= m:
                break
            p = u[t * num_blocks + b, 0] * m00
            base = np.rint(p * inv00)
            r = p - base * m00
            s_minus = q_minus - 2.0 * r * c_minus
            s_plus = q_plus - 2.0 * r * c_plus
            off = 0
            if s_minus <= 0.0:
                off = -1
            elif s_plus < 0.0:
                off = 1
            l0 = np.int64(base) + off
            z = p - l0 * m00
            y = blocks[b, 0] / mult + z
            base = np.rint(y * inv00)
            r = y - base * m00
            s_minus = q_minus - 2.0 * r * c_minus
            s_plus = q_plus - 2.0 * r * c_plus
            off = 0
            if s_minus <= 0.0:
                off = -1
            elif s_plus < 0.0:
                off = 1
            l0 = np.int64(base) + off
            e = nu_hat * (mult * (l0 * m00 - z)) - h_pad[b]
            sum_eps[b] += e
            sum_sq[b] += e * e
            acc_energy += e * e
        energies[t] = acc_energy


@njit(cache=True, nogil=True)
def _error_stats_d2(u, blocks, h_pad, m, mult, nu_hat, inv_t, mat_t,
                    offsets, off_pts, off_sq, sum_eps, sum_sq, energies):
    num_blocks = blocks.shape[0]
    i00, i10 = inv_t[0, 0], inv_t[1, 0]
    i01, i11 = inv_t[0, 1], inv_t[1, 1]
    m00, m10 = mat_t[0, 0], mat_t[1, 0]
    m01, m11 = mat_t[0, 1], mat_t[1, 1]
    for t in range(energies.size):
        acc_energy = 0.0
        for b in range(num_blocks):
            row = t * num_blocks + b
            p0 = u[row, 0] * m00 + u[row, 1] * m10
            p1 = u[row, 0] * m01 + u[row, 1] * m11
            b0 = np.rint(p0 * i00 + p1 * i10)
            b1 = np.rint(p0 * i01 + p1 * i11)
            r0 = p0 - (b0 * m00 + b1 * m10)
            r1 = p1 - (b0 * m01 + b1 * m11)
            best_k = 0
            best_s = np.inf
            for k in range(9):
                s = off_sq[k]
                s -= 2.0 * r0 * off_pts[k, 0]
                s -= 2.0 * r1 * off_pts[k, 1]
                if s < best_s:
                    best_s = s
                    best_k = k
            l0 = np.int64(b0) + offsets[best_k, 0]
            l1 = np.int64(b1) + offsets[best_k, 1]
            z0 = p0 - (l0 * m00 + l1 * m10)
            z1 = p1 - (l0 * m01 + l1 * m11)
            y0 = blocks[b, 0] / mult + z0
            y1 = blocks[b, 1] / mult + z1
            b0 = np.rint(y0 * i00 + y1 * i10)
            b1 = np.rint(y0 * i01 + y1 * i11)
            r0 = y0 - (b0 * m00 + b1 * m10)
            r1 = y1 - (b0 * m01 + b1 * m11)
            best_k = 0
            best_s = np.inf
            for k in range(9):
                s = off_sq[k]
                s -= 2.0 * r0 * off_pts[k, 0]
                s -= 2.0 * r1 * off_pts[k, 1]
                if s < best_s:
                    best_s = s
                    best_k = k
            l0 = np.int64(b0) + offsets[best_k, 0]
            l1 = np.int64(b1) + offsets[best_k, 1]
            c = 2 * b
            if c < m:
                pt = l0 * m00 + l1 * m10
                e = nu_hat * (mult * (pt - z0)) - h_pad[c]
                sum_eps[c] += e
                sum_sq[c] += e * e
                acc_energy += e * e
            c += 1
            if c < m:
                pt = l0 * m01 + l1 * m11
                e = nu_hat * (mult * (pt - z1)) - h_pad[c]
                sum_eps[c] += e
                sum_sq[c] += e * e
                acc_energy += e * e
        energies[t] = acc_energy


def conditional_error_stats(u, blocks, h_pad, m, mult, nu_hat, inv_t, mat_t,
                            offsets, off_pts, off_sq, sum_eps, sum_sq,
                            energies):
    """Dithered-quantization error statistics for a chunk of trials.

    ``u`` holds T*M rows of uniforms on [-1/2, 1/2); trial t covers rows
    [t*M, (t+1)*M).  Per real coordinate c < m the error sums land in
    sum_eps/sum_sq, per trial the squared error norm in energies.  Every
    arithmetic step mirrors the codec's encode/decode expressions.
    """
    dim = blocks.shape[1]
    if dim == 1:
        _error_stats_d1(u, blocks, h_pad, m, mult, nu_hat, inv_t, mat_t,
                        off_pts, off_sq, sum_eps, sum_sq, energies)
    elif dim == 2:
        _error_stats_d2(u, blocks, h_pad, m, mult, nu_hat, inv_t, mat_t,
                        offsets, off_pts, off_sq, sum_eps, sum_sq, energies)
    else:
        raise NotImplementedError("error evaluator supports L <= 2 presets")


@njit(cache=True, nogil=True)
def _read_gamma(bits, pos):
    # returns (value >= 1, new_pos, status)
    n = bits.size
    start = pos
    nz = 0
    while pos < n and bits[pos] == 0:
        pos += 1
        nz += 1
    if pos >= n:
        return 0, start, STATUS_NO_TERMINATOR
    end = pos + nz + 1
    if end > n:
        return 0, start, STATUS_OVERRUN
    v = np.int64(0)
    for p in range(pos, end):
        v = (v << 1) | bits[p]
    return v, end, STATUS_OK


@njit(cache=True, nogil=True)
def gamma_stream(bits, pos, out):
    """Read len(out) gamma values starting at pos; returns (status, pos)."""
    for i in range(out.size):
        v, pos, status = _read_gamma(bits, pos)
        if status != STATUS_OK:
            return status, pos
        out[i] = v
    return STATUS_OK, pos


@njit(cache=True, nogil=True)
def _zigzag_scalar(code):
    half = code >> 1
    return -half - 1 if code & 1 else half


@njit(cache=True, nogil=True)
def rank_stream(bits, dim, use_rice, chunk, param_bits, param_max,
                num_ranks, table, out):
    """Decode the rank-coded payload body (after the flag bit) into coords.

    Returns (status, position); ``out`` has shape (count, dim).
    """
    n = bits.size
    pos = 1
    k = 0
    for i in range(out.shape[0]):
        if use_rice and i % chunk == 0:
            if i == 0:
                if pos + param_bits > n:
                    return STATUS_OVERRUN, pos
                k = 0
                for p in range(pos, pos + param_bits):
                    k = (k << 1) | bits[p]
                pos += param_bits
            else:
                g, pos, status = _read_gamma(bits, pos)
                if status != STATUS_OK:
                    return status, pos
                k += _zigzag_scalar(g - 1)
            if k < 0 or k > param_max:
                return STATUS_BAD_PARAM, pos
        if use_rice:
            start = pos
            q = np.int64(0)
            while pos < n and bits[pos] == 0:
                pos += 1
                q += 1
            if pos >= n:
                return STATUS_NO_TERMINATOR, start
            pos += 1
            v = q
            if k > 0:
                if pos + k > n:
                    return STATUS_OVERRUN, start
                rem = np.int64(0)
                for p in range(pos, pos + k):
                    rem = (rem << 1) | bits[p]
                pos += k
                v = (q << k) | rem
        else:
            g, pos, status = _read_gamma(bits, pos)
            if status != STATUS_OK:
                return status, pos
            v = g - 1
        if v < num_ranks:
            for j in range(dim):
                out[i, j] = table[v, j]
        elif v == num_ranks:
            for j in range(dim):
                g, pos, status = _read_gamma(bits, pos)
                if status != STATUS_OK:
                    return status, pos
                out[i, j] = _zigzag_scalar(g - 1)
        else:
            return STATUS_BAD_SYMBOL, pos
    if pos != n:
        return STATUS_TRAILING, pos
    return STATUS_OK, pos


STATUS_MESSAGES = {
    STATUS_NO_TERMINATOR: "prefix code has no terminator",
    STATUS_OVERRUN: "code overruns the stream",
    STATUS_BAD_SYMBOL: "symbol out of range",
    STATUS_TRAILING: "trailing bits after the last symbol",
    STATUS_BAD_PARAM: "rice parameter out of range",
}
