"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The public functions dispatch on :data:`spmae._accel.USE_NUMBA`. Both paths
perform the same floating-point operations in the same order, so for the
integer/boolean kernels the outputs are identical and for the float kernels
they agree to rounding.
"""
import numpy as np

from . import _accel
from ._accel import njit

# ---------------------------------------------------------------------------
# chaos game
# ---------------------------------------------------------------------------


@njit(cache=True)
def _chaos_game_nb(maps, choices, starts, burn_in):
    n_chains, n_steps = choices.shape
    n_out = n_chains * (n_steps - burn_in)
    xs = np.empty(n_out)
    ys = np.empty(n_out)
    ids = np.empty(n_out, dtype=np.int64)
    # step-major output order matches the vectorized twin
    for c in range(n_chains):
        x = starts[c, 0]
        y = starts[c, 1]
        for s in range(n_steps):
            k = choices[c, s]
            nx = maps[k, 0, 0] * x + maps[k, 0, 1] * y + maps[k, 0, 2]
            ny = maps[k, 1, 0] * x + maps[k, 1, 1] * y + maps[k, 1, 2]
            x = nx
            y = ny
            if s >= burn_in:
                j = (s - burn_in) * n_chains + c
                xs[j] = x
                ys[j] = y
                ids[j] = k
    return xs, ys, ids


def _chaos_game_np(maps, choices, starts, burn_in):
    n_chains, n_steps = choices.shape
    x = starts[:, 0].copy()
    y = starts[:, 1].copy()
    xs, ys, ids = [], [], []
    for s in range(n_steps):
        k = choices[:, s]
        m = maps[k]
        nx = m[:, 0, 0] * x + m[:, 0, 1] * y + m[:, 0, 2]
        ny = m[:, 1, 0] * x + m[:, 1, 1] * y + m[:, 1, 2]
        x, y = nx, ny
        if s >= burn_in:
            xs.append(x)
            ys.append(y)
            ids.append(k)
    if not xs:
        return np.empty(0), np.empty(0), np.empty(0, dtype=np.int64)
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ids).astype(np.int64)


def chaos_game(maps, choices, starts, burn_in):
    """Iterate affine maps along pre-drawn index chains.

    ``maps`` is (m, 2, 3) holding ``[A | t]`` per map, ``choices`` is
    (chains, steps) of map indices and ``starts`` (chains, 2). Returns the
    visited points after ``burn_in`` steps plus the map index that produced
    each one, ordered step-major.
    """
    maps = np.ascontiguousarray(maps, dtype=np.float64)
    choices = np.ascontiguousarray(choices, dtype=np.int64)
    starts = np.ascontiguousarray(starts, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _chaos_game_nb(maps, choices, starts, int(burn_in))
    return _chaos_game_np(maps, choices, starts, int(burn_in))


# ---------------------------------------------------------------------------
# dead-leaves stamping
# ---------------------------------------------------------------------------

DISK, SQUARE, RECT = 0, 1, 2


@njit(cache=True)
def _stamp_nb(canvas, painted, kinds, cx, cy, radius, aspect, cos_t, sin_t, colors,
              target, n_painted):
    n_ch, h, w = canvas.shape
    used = 0
    for i in range(kinds.shape[0]):
        if n_painted >= target:
            break
        r = radius[i]
        x0 = max(int(np.ceil(cx[i] - r)), 0)
        x1 = min(int(np.floor(cx[i] + r)), w - 1)
        y0 = max(int(np.ceil(cy[i] - r)), 0)
        y1 = min(int(np.floor(cy[i] + r)), h - 1)
        for py in range(y0, y1 + 1):
            dy = py - cy[i]
            for px in range(x0, x1 + 1):
                dx = px - cx[i]
                if kinds[i] == 0:
                    inside = dx * dx + dy * dy <= r * r
                elif kinds[i] == 1:
                    inside = abs(dx) <= r and abs(dy) <= r
                else:
                    u = dx * cos_t[i] + dy * sin_t[i]
                    v = -dx * sin_t[i] + dy * cos_t[i]
                    inside = abs(u) <= r and abs(v) <= r * aspect[i]
                if inside:
                    for c in range(n_ch):
                        canvas[c, py, px] = colors[i, c]
                    if not painted[py, px]:
                        painted[py, px] = True
                        n_painted += 1
        used += 1
    return used, n_painted


def _stamp_np(canvas, painted, kinds, cx, cy, radius, aspect, cos_t, sin_t, colors,
              target, n_painted):
    _, h, w = canvas.shape
    used = 0
    for i in range(kinds.shape[0]):
        if n_painted >= target:
            break
        r = radius[i]
        x0 = max(int(np.ceil(cx[i] - r)), 0)
        x1 = min(int(np.floor(cx[i] + r)), w - 1)
        y0 = max(int(np.ceil(cy[i] - r)), 0)
        y1 = min(int(np.floor(cy[i] + r)), h - 1)
        used += 1
        if x1 < x0 or y1 < y0:
            continue
        dy = (np.arange(y0, y1 + 1) - cy[i])[:, None]
        dx = (np.arange(x0, x1 + 1) - cx[i])[None, :]
        if kinds[i] == DISK:
            inside = dx * dx + dy * dy <= r * r
        elif kinds[i] == SQUARE:
            inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        else:
            u = dx * cos_t[i] + dy * sin_t[i]
            v = -dx * sin_t[i] + dy * cos_t[i]
            inside = (np.abs(u) <= r) & (np.abs(v) <= r * aspect[i])
        window = canvas[:, y0:y1 + 1, x0:x1 + 1]
        window[:, inside] = colors[i][:, None]
        pw = painted[y0:y1 + 1, x0:x1 + 1]
        n_painted += int(np.count_nonzero(inside & ~pw))
        pw |= inside
    return used, n_painted


def stamp_shapes(canvas, painted, kinds, cx, cy, radius, aspect, angle, colors,
                 target, n_painted):
    """Paint shapes in order onto ``canvas`` (in place) until ``target`` pixels are covered.

    Returns ``(shapes_used, pixels_painted)``.
    """
    args = (
        canvas, painted,
        np.ascontiguousarray(kinds, dtype=np.int64),
        np.ascontiguousarray(cx, dtype=np.float64),
        np.ascontiguousarray(cy, dtype=np.float64),
        np.ascontiguousarray(radius, dtype=np.float64),
        np.ascontiguousarray(aspect, dtype=np.float64),
        np.cos(np.asarray(angle, dtype=np.float64)),
        np.sin(np.asarray(angle, dtype=np.float64)),
        np.ascontiguousarray(colors, dtype=np.float64),
        int(target), int(n_painted),
    )
    if _accel.USE_NUMBA:
        used, n = _stamp_nb(*args)
    else:
        used, n = _stamp_np(*args)
    return int(used), int(n)


# ---------------------------------------------------------------------------
# contour distance field
# ---------------------------------------------------------------------------


@njit(cache=True)
def _point_distance_nb(px, py, h, w, reach):
    out = np.full((h, w), np.inf)
    for i in range(px.shape[0]):
        x0 = max(int(np.floor(px[i] - reach)), 0)
        x1 = min(int(np.ceil(px[i] + reach)), w - 1)
        y0 = max(int(np.floor(py[i] - reach)), 0)
        y1 = min(int(np.ceil(py[i] + reach)), h - 1)
        for y in range(y0, y1 + 1):
            dy = y - py[i]
            for x in range(x0, x1 + 1):
                dx = x - px[i]
                d = np.sqrt(dx * dx + dy * dy)
                if d < out[y, x]:
                    out[y, x] = d
    return out


def _point_distance_np(px, py, h, w, reach):
    out = np.full((h, w), np.inf)
    if px.size == 0:
        return out
    span = int(np.ceil(reach)) + 1
    off = np.arange(-span, span + 1)
    x0 = np.floor(px - reach).astype(np.int64)
    y0 = np.floor(py - reach).astype(np.int64)
    xx = x0[:, None, None] + off[None, None, :] + span
    yy = y0[:, None, None] + off[None, :, None] + span
    xx = np.broadcast_to(xx, (px.size, off.size, off.size))
    yy = np.broadcast_to(yy, (px.size, off.size, off.size))
    # window bounds identical to the compiled loop
    xlo = np.maximum(np.floor(px - reach), 0)[:, None, None]
    xhi = np.minimum(np.ceil(px + reach), w - 1)[:, None, None]
    ylo = np.maximum(np.floor(py - reach), 0)[:, None, None]
    yhi = np.minimum(np.ceil(py + reach), h - 1)[:, None, None]
    ok = (xx >= xlo) & (xx <= xhi) & (yy >= ylo) & (yy <= yhi)
    dx = xx - px[:, None, None]
    dy = yy - py[:, None, None]
    d = np.sqrt(dx * dx + dy * dy)
    flat = (yy * w + xx)[ok]
    np.minimum.at(out.reshape(-1), flat, d[ok])
    return out


def point_distance(px, py, h, w, reach):
    """Distance from every pixel center to the nearest of the points.

    Only pixels within ``reach`` of a point (by bounding window) are
    evaluated; the rest stay ``inf``.
    """
    px = np.ascontiguousarray(px, dtype=np.float64)
    py = np.ascontiguousarray(py, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _point_distance_nb(px, py, int(h), int(w), float(reach))
    return _point_distance_np(px, py, int(h), int(w), float(reach))


# ---------------------------------------------------------------------------
# Canny: non-maximum suppression and hysteresis
# ---------------------------------------------------------------------------

# neighbour offsets (dy, dx) for the four quantized gradient directions
_NMS_OFFSETS = np.array([[0, 1], [1, 1], [1, 0], [1, -1]], dtype=np.int64)


@njit(cache=True)
def _nms_nb(mag, sector, offsets):
    h, w = mag.shape
    out = np.zeros_like(mag)
    for y in range(h):
        for x in range(w):
            m = mag[y, x]
            if m == 0.0:
                continue
            dy = offsets[sector[y, x], 0]
            dx = offsets[sector[y, x], 1]
            ya, xa = y - dy, x - dx
            yb, xb = y + dy, x + dx
            a = mag[ya, xa] if 0 <= ya < h and 0 <= xa < w else 0.0
            b = mag[yb, xb] if 0 <= yb < h and 0 <= xb < w else 0.0
            if m >= a and m > b:
                out[y, x] = m
    return out


def _nms_np(mag, sector, offsets):
    h, w = mag.shape
    padded = np.zeros((h + 2, w + 2), dtype=mag.dtype)
    padded[1:-1, 1:-1] = mag
    keep = np.zeros((h, w), dtype=bool)
    for s in range(4):
        dy, dx = offsets[s]
        before = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        after = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        keep |= (sector == s) & (mag >= before) & (mag > after)
    keep &= mag != 0.0
    return np.where(keep, mag, 0.0)


def non_max_suppression(mag, sector):
    """Thin gradient magnitudes along the quantized direction ``sector`` (0..3).

    Ties along the gradient keep the pixel on the positive side, so a plateau
    two pixels wide leaves a single-pixel ridge.
    """
    mag = np.ascontiguousarray(mag, dtype=np.float64)
    sector = np.ascontiguousarray(sector, dtype=np.int64)
    if _accel.USE_NUMBA:
        return _nms_nb(mag, sector, _NMS_OFFSETS)
    return _nms_np(mag, sector, _NMS_OFFSETS)


@njit(cache=True)
def _hysteresis_nb(strong, weak):
    h, w = strong.shape
    out = strong.copy()
    stack = np.empty((h * w, 2), dtype=np.int64)
    top = 0
    for y in range(h):
        for x in range(w):
            if strong[y, x]:
                stack[top, 0] = y
                stack[top, 1] = x
                top += 1
    while top > 0:
        top -= 1
        y = stack[top, 0]
        x = stack[top, 1]
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                yy = y + dy
                xx = x + dx
                if 0 <= yy < h and 0 <= xx < w and weak[yy, xx] and not out[yy, xx]:
                    out[yy, xx] = True
                    stack[top, 0] = yy
                    stack[top, 1] = xx
                    top += 1
    return out


def _hysteresis_np(strong, weak):
    out = strong.copy()
    h, w = out.shape
    while True:
        p = np.zeros((h + 2, w + 2), dtype=bool)
        p[1:-1, 1:-1] = out
        grown = np.zeros_like(out)
        for dy in range(3):
            for dx in range(3):
                grown |= p[dy:dy + h, dx:dx + w]
        new = out | (grown & weak)
        if np.array_equal(new, out):
            return out
        out = new


def hysteresis(strong, weak):
    """Keep weak pixels 8-connected (through weak pixels) to a strong pixel."""
    strong = np.ascontiguousarray(strong, dtype=np.bool_)
    weak = np.ascontiguousarray(weak, dtype=np.bool_)
    if _accel.USE_NUMBA:
        return _hysteresis_nb(strong, weak)
    return _hysteresis_np(strong, weak)


# ---------------------------------------------------------------------------
# radix-2 FFT
# ---------------------------------------------------------------------------


def _bit_reverse_indices(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _twiddles(n):
    return np.exp(-2j * np.pi * np.arange(n // 2) / n)


@njit(cache=True)
def _fft_nb(x, rev, tw):
    rows, n = x.shape
    out = np.empty_like(x)
    for r in range(rows):
        for i in range(n):
            out[r, i] = x[r, rev[i]]
    size = 2
    while size <= n:
        half = size // 2
        step = n // size
        for r in range(rows):
            for start in range(0, n, size):
                for k in range(half):
                    t = tw[k * step] * out[r, start + k + half]
                    u = out[r, start + k]
                    out[r, start + k] = u + t
                    out[r, start + k + half] = u - t
        size *= 2
    return out


def _fft_np(x, rev, tw):
    rows, n = x.shape
    out = x[:, rev].copy()
    size = 2
    while size <= n:
        half = size // 2
        blocks = out.reshape(rows, n // size, size)
        t = tw[::n // size][:half] * blocks[:, :, half:]
        u = blocks[:, :, :half].copy()
        blocks[:, :, :half] = u + t
        blocks[:, :, half:] = u - t
        size *= 2
    return out


def fft_radix2(x):
    """Iterative Cooley-Tukey FFT along the last axis; length must be a power of two."""
    x = np.asarray(x)
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    lead = x.shape[:-1]
    flat = np.ascontiguousarray(x.reshape(-1, n), dtype=np.complex128)
    if n == 1:
        return flat.reshape(lead + (n,)).copy()
    rev = _bit_reverse_indices(n)
    tw = _twiddles(n)
    if _accel.USE_NUMBA:
        out = _fft_nb(flat, rev, tw)
    else:
        out = _fft_np(flat, rev, tw)
    return out.reshape(lead + (n,))
