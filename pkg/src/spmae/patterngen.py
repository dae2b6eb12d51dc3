"""Procedural synthetic pattern families and dataset materialization.

Every generator takes a :class:`GeneratorSpec` and returns a float64 array of
shape ``(C, H, W)`` with values in ``[0, 1]``. Output depends only on the
spec: all randomness is drawn from ``make_rng(spec.seed)``.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import kernels
from .imageio import write_pnm
from .seeding import derive_seed, make_rng


class ParameterError(ValueError):
    """Invalid generator spec or parameter."""


class GenerationError(RuntimeError):
    def __init__(self, message, occupancy=None, index=None):
        super().__init__(message)
        self.occupancy = occupancy
        self.index = index


class Family(str, Enum):
    DEAD_LEAVES = "dead-leaves"
    SPECTRAL_NOISE = "spectral-noise"
    MULTISCALE_NOISE = "multiscale-noise"
    FRACTAL_IFS = "fractal-ifs"
    VISUAL_ATOMS = "visual-atoms"
    SHADER_LIKE = "shader-like"


DEFAULT_PARAMS = {
    Family.DEAD_LEAVES: dict(shapes=("disk", "square", "rect"), r_min=None, r_max=None,
                             exponent=-3.0, max_shapes=10000, coverage=0.99),
    Family.SPECTRAL_NOISE: dict(alpha=2.0),
    Family.MULTISCALE_NOISE: dict(octaves=4, decay=0.6, tail_shape=0.5, scale=1.0),
    Family.FRACTAL_IFS: dict(n_maps=None, iterations=100_000, occupancy=(0.05, 0.95),
                             max_retries=50, maps=None, window=None, chains=256, burn_in=20),
    Family.VISUAL_ATOMS: dict(n1=None, n2=None, eta=None, orbits=3, stroke_width=1.0,
                              radii=None, phases=None),
    Family.SHADER_LIKE: dict(depth=4, expression=None),
}


@dataclass(frozen=True)
class GeneratorSpec:
    family: Family
    width: int = 224
    height: int = 224
    channels: int = 3
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            object.__setattr__(self, "family", Family(self.family))
        except ValueError:
            raise ParameterError(f"unknown family {self.family!r}") from None
        if self.width < 8 or self.height < 8:
            raise ParameterError(f"image must be at least 8x8, got {self.width}x{self.height}")
        if self.channels not in (1, 3):
            raise ParameterError(f"channels must be 1 or 3, got {self.channels}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ParameterError("seed must be an unsigned 64-bit integer")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.family])
        if unknown:
            raise ParameterError(f"unknown {self.family.value} params: {sorted(unknown)}")

    def resolved(self):
        """Family defaults overlaid with the explicit params."""
        p = dict(DEFAULT_PARAMS[self.family])
        p.update(self.params)
        return p


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _minmax(img):
    """Per-channel min-max normalization; constant channels become 0."""
    out = np.empty_like(img, dtype=np.float64)
    for c in range(img.shape[0]):
        lo, hi = img[c].min(), img[c].max()
        out[c] = (img[c] - lo) / (hi - lo) if hi > lo else 0.0
    return np.clip(out, 0.0, 1.0)


def resample_bilinear(plane, out_h, out_w):
    """Bilinear resize of a 2-D array with corner pixels aligned."""
    h, w = plane.shape
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    return _sample_bilinear(plane, ys[:, None] + 0 * xs[None, :], xs[None, :] + 0 * ys[:, None])


def _sample_bilinear(plane, ys, xs, fill=0.0):
    h, w = plane.shape
    tol = 1e-9  # absorbs trig rounding at the border, e.g. cos(pi / 2) != 0
    inside = (ys >= -tol) & (ys <= h - 1 + tol) & (xs >= -tol) & (xs <= w - 1 + tol)
    yc = np.clip(ys, 0, h - 1)
    xc = np.clip(xs, 0, w - 1)
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(h - 2, 0))
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = yc - y0
    fx = xc - x0
    top = plane[y0, x0] * (1 - fx) + plane[y0, x1] * fx
    bot = plane[y1, x0] * (1 - fx) + plane[y1, x1] * fx
    return np.where(inside, top * (1 - fy) + bot * fy, fill)


def rotate_bilinear(img, angle):
    """Rotate a C x H x W image by ``angle`` radians about its center (zero fill)."""
    _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = math.cos(angle), math.sin(angle)
    # inverse map: output pixel pulls from the source rotated by -angle
    dx, dy = xx - cx, yy - cy
    sx = cx + c * dx + s * dy
    sy = cy - s * dx + c * dy
    return np.stack([_sample_bilinear(p, sy, sx) for p in img])


# ---------------------------------------------------------------------------
# dead leaves
# ---------------------------------------------------------------------------

_SHAPE_CODES = {"disk": kernels.DISK, "square": kernels.SQUARE, "rect": kernels.RECT}


@dataclass
class DeadLeavesResult:
    image: np.ndarray
    coverage: float
    shapes_used: int
    shapes: dict


def sample_power_law(rng, n, r_min, r_max, exponent):
    """Inverse-CDF draws from a density proportional to r**exponent on [r_min, r_max]."""
    u = rng.random(n)
    if r_min == r_max:
        return np.full(n, float(r_min))
    if abs(exponent + 1.0) < 1e-12:
        return r_min * (r_max / r_min) ** u
    a = exponent + 1.0
    return (r_min ** a + u * (r_max ** a - r_min ** a)) ** (1.0 / a)


def render_shapes(shapes, height, width, channels):
    """Stamp an explicit shape list in order; returns (image, painted mask)."""
    canvas = np.zeros((channels, height, width))
    painted = np.zeros((height, width), dtype=bool)
    kernels.stamp_shapes(canvas, painted, shapes["kind"], shapes["cx"], shapes["cy"],
                         shapes["radius"], shapes["aspect"], shapes["angle"], shapes["color"],
                         height * width + 1, 0)
    return canvas, painted


def dead_leaves(spec):
    p = spec.resolved()
    h, w, c = spec.height, spec.width, spec.channels
    side = min(h, w)
    r_min = p["r_min"] if p["r_min"] is not None else max(1.0, side / 32.0)
    r_max = p["r_max"] if p["r_max"] is not None else side / 4.0
    tau, m = p["coverage"], p["max_shapes"]
    if not (0 < r_min <= r_max <= side / 2.0):
        raise ParameterError(f"radius range must satisfy 0 < r_min <= r_max <= {side / 2}, "
                             f"got [{r_min}, {r_max}]")
    if not (0.0 < tau <= 1.0):
        raise ParameterError(f"coverage must lie in (0, 1], got {tau}")
    if int(m) < 1:
        raise ParameterError("max_shapes must be >= 1")
    try:
        codes = np.array([_SHAPE_CODES[s] for s in p["shapes"]], dtype=np.int64)
    except KeyError as exc:
        raise ParameterError(f"unknown shape {exc.args[0]!r}") from None
    if codes.size == 0:
        raise ParameterError("shape set is empty")

    rng = make_rng(spec.seed)
    canvas = np.zeros((c, h, w))
    painted = np.zeros((h, w), dtype=bool)
    target = math.ceil(tau * h * w)
    n_painted, used = 0, 0
    placed = {k: [] for k in ("kind", "cx", "cy", "radius", "aspect", "angle", "color")}
    chunk = 256
    while used < m and n_painted < target:
        n = min(chunk, int(m) - used)
        batch = dict(
            kind=codes[rng.integers(0, codes.size, n)],
            cx=rng.random(n) * w,
            cy=rng.random(n) * h,
            radius=sample_power_law(rng, n, r_min, r_max, p["exponent"]),
            aspect=rng.uniform(0.3, 1.0, n),
            angle=rng.uniform(0.0, math.pi, n),
            color=rng.random((n, c)),
        )
        k, n_painted = kernels.stamp_shapes(canvas, painted, batch["kind"], batch["cx"], batch["cy"],
                                            batch["radius"], batch["aspect"], batch["angle"],
                                            batch["color"], target, n_painted)
        for key in placed:
            placed[key].append(batch[key][:k])
        used += k
    shapes = {key: np.concatenate(v) for key, v in placed.items()}
    return DeadLeavesResult(canvas, n_painted / (h * w), used, shapes)


def gen_dead_leaves(spec):
    return dead_leaves(spec).image


# ---------------------------------------------------------------------------
# statistical image models
# ---------------------------------------------------------------------------


def radial_frequency(h, w):
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    return np.sqrt(fy * fy + fx * fx)


def gen_spectral_noise(spec):
    alpha = float(spec.resolved()["alpha"])
    if not 0.0 <= alpha <= 4.0:
        raise ParameterError(f"spectral exponent must lie in [0, 4], got {alpha}")
    h, w, c = spec.height, spec.width, spec.channels
    rng = make_rng(spec.seed)
    noise = rng.standard_normal((c, h, w))
    f = radial_frequency(h, w)
    amp = np.zeros_like(f)
    nz = f > 0
    amp[nz] = f[nz] ** (-alpha / 2.0)
    spectrum = np.fft.fft2(noise) * amp
    spectrum[:, 0, 0] = 0.5 * h * w
    return _minmax(np.fft.ifft2(spectrum).real)


def sample_generalized_gaussian(rng, shape, beta):
    """Unit-scale generalized Gaussian draws, density proportional to exp(-|x|**beta)."""
    mag = rng.gamma(1.0 / beta, 1.0, size=shape) ** (1.0 / beta)
    return np.where(rng.random(shape) < 0.5, -mag, mag)


def gen_multiscale_noise(spec):
    p = spec.resolved()
    k, gamma, beta, scale = int(p["octaves"]), float(p["decay"]), float(p["tail_shape"]), float(p["scale"])
    if not 2 <= k <= 6:
        raise ParameterError(f"octave count must lie in [2, 6], got {k}")
    if not 0.0 < gamma <= 1.0:
        raise ParameterError(f"octave decay must lie in (0, 1], got {gamma}")
    if beta <= 0:
        raise ParameterError("tail shape must be positive")
    h, w, c = spec.height, spec.width, spec.channels
    rng = make_rng(spec.seed)
    out = np.zeros((c, h, w))
    for octave in range(k):
        oh = max(2, math.ceil(h / 2 ** octave))
        ow = max(2, math.ceil(w / 2 ** octave))
        coeffs = scale * sample_generalized_gaussian(rng, (c, oh, ow), beta)
        for ch in range(c):
            out[ch] += gamma ** octave * resample_bilinear(coeffs[ch], h, w)
    return _minmax(out)


# ---------------------------------------------------------------------------
# IFS fractals
# ---------------------------------------------------------------------------


@dataclass
class FractalResult:
    image: np.ndarray
    maps: np.ndarray
    occupancy: float
    attempts: int


def random_contraction(rng, s_range=(0.25, 0.9)):
    """Affine map [A | t] with both singular values of A inside ``s_range``."""
    t1, t2 = rng.uniform(0, 2 * math.pi, 2)
    s = rng.uniform(*s_range, 2)
    r1 = np.array([[math.cos(t1), -math.sin(t1)], [math.sin(t1), math.cos(t1)]])
    r2 = np.array([[math.cos(t2), -math.sin(t2)], [math.sin(t2), math.cos(t2)]])
    flip = np.diag([1.0, 1.0 if rng.random() < 0.5 else -1.0])
    a = r1 @ np.diag(s) @ flip @ r2
    return np.hstack([a, rng.uniform(-1.0, 1.0, (2, 1))])


def map_probabilities(maps):
    """Proportional to |det A|, floored at a quarter of the uniform weight."""
    det = np.abs(maps[:, 0, 0] * maps[:, 1, 1] - maps[:, 0, 1] * maps[:, 1, 0])
    m = len(maps)
    p = det / det.sum() if det.sum() > 0 else np.full(m, 1.0 / m)
    p = np.maximum(p, 0.25 / m)
    return p / p.sum()


# an attractor narrower than this (in map units) is treated as a point, not magnified
_MIN_EXTENT = 1e-3


def _auto_window(xs, ys):
    """Bounding box of the points plus a 2% margin, at least _MIN_EXTENT wide."""
    out = []
    for v in (xs, ys):
        lo, hi = v.min(), v.max()
        half = max(hi - lo, _MIN_EXTENT) * 0.51
        mid = 0.5 * (lo + hi)
        out += [mid - half, mid + half]
    return tuple(out)


def render_ifs(maps, rng, height, width, channels, iterations, chains=256, burn_in=20,
               window=None, colors=None):
    """Chaos-game render; returns (image, touched-pixel fraction)."""
    maps = np.asarray(maps, dtype=np.float64)
    m = len(maps)
    steps = burn_in + max(1, math.ceil(iterations / chains))
    choices = rng.choice(m, size=(chains, steps), p=map_probabilities(maps))
    starts = rng.uniform(-1.0, 1.0, (chains, 2))
    if colors is None:
        colors = rng.uniform(0.2, 1.0, (m, channels)) if channels == 3 else np.ones((m, 1))
    xs, ys, ids = kernels.chaos_game(maps, choices, starts, burn_in)
    ok = np.isfinite(xs) & np.isfinite(ys)
    xs, ys, ids = xs[ok], ys[ok], ids[ok]
    if window is None:
        window = _auto_window(xs, ys)
    x0, x1, y0, y1 = window
    px = np.floor((xs - x0) / (x1 - x0) * width).astype(np.int64)
    py = np.floor((ys - y0) / (y1 - y0) * height).astype(np.int64)
    px[xs == x1] = width - 1
    py[ys == y1] = height - 1
    inside = (px >= 0) & (px < width) & (py >= 0) & (py < height)
    flat = ids[inside] * (height * width) + py[inside] * width + px[inside]
    counts = np.bincount(flat, minlength=m * height * width).reshape(m, height * width).astype(np.float64)
    total = counts.sum(axis=0)
    occupancy = float(np.count_nonzero(total)) / (height * width)
    img = np.log1p(np.asarray(colors).T @ counts).reshape(channels, height, width)
    peak = img.max()
    if peak > 0:
        img /= peak
    return np.clip(img, 0.0, 1.0), occupancy


def fractal_ifs(spec):
    p = spec.resolved()
    lo, hi = p["occupancy"]
    if not 0.0 < lo <= hi < 1.0:
        raise ParameterError(f"occupancy band must lie inside (0, 1), got {p['occupancy']}")
    if int(p["iterations"]) < 10_000:
        raise ParameterError("iteration count must be >= 1e4")
    if p["n_maps"] is not None and not 2 <= int(p["n_maps"]) <= 8:
        raise ParameterError(f"map count must lie in [2, 8], got {p['n_maps']}")
    rng = make_rng(spec.seed)
    retries = int(p["max_retries"])
    occupancy = None
    for attempt in range(retries + 1):
        if p["maps"] is not None:
            maps = np.asarray(p["maps"], dtype=np.float64).reshape(-1, 2, 3)
        else:
            m = int(p["n_maps"]) if p["n_maps"] is not None else int(rng.integers(2, 9))
            maps = np.stack([random_contraction(rng) for _ in range(m)])
        img, occupancy = render_ifs(maps, rng, spec.height, spec.width, spec.channels,
                                    int(p["iterations"]), int(p["chains"]), int(p["burn_in"]),
                                    p["window"])
        if lo <= occupancy <= hi:
            return FractalResult(img, maps, occupancy, attempt + 1)
    raise GenerationError(f"no IFS accepted after {retries} retries "
                          f"(last occupancy {occupancy:.4f}, band [{lo}, {hi}])", occupancy=occupancy)


def gen_fractal_ifs(spec):
    return fractal_ifs(spec).image


# ---------------------------------------------------------------------------
# visual atoms
# ---------------------------------------------------------------------------


def contour_points(r0, eta, n1, n2, phase, cx, cy, count):
    theta = 2 * math.pi * np.arange(count) / count
    r = r0 * (1.0 + eta * (np.sin(n1 * theta) + np.sin(n2 * theta + phase)))
    return cx + r * np.cos(theta), cy + r * np.sin(theta)


def gen_visual_atoms(spec):
    p = spec.resolved()
    h, w, c = spec.height, spec.width, spec.channels
    side = min(h, w)
    stroke = float(p["stroke_width"])
    if stroke < 1.0:
        raise ParameterError("stroke width must be >= 1 pixel")
    if stroke >= side:
        raise ParameterError(f"stroke width {stroke} must be below min(H, W) = {side}")
    rng = make_rng(spec.seed)
    n1 = int(p["n1"]) if p["n1"] is not None else int(rng.integers(1, 21))
    n2 = int(p["n2"]) if p["n2"] is not None else int(rng.integers(1, 21))
    if not (1 <= n1 <= 20 and 1 <= n2 <= 20):
        raise ParameterError(f"frequencies must lie in [1, 20], got ({n1}, {n2})")
    eta = float(p["eta"]) if p["eta"] is not None else float(rng.uniform(0.02, 0.15))
    if eta < 0:
        raise ParameterError("amplitude must be non-negative")
    orbits = int(p["orbits"])
    if orbits < 1:
        raise ParameterError("orbit count must be >= 1")
    r_hi = 0.45 * side / (1.0 + 2.0 * eta)
    radii = (np.asarray(p["radii"], dtype=np.float64) if p["radii"] is not None
             else rng.uniform(0.1 * side, max(r_hi, 0.1 * side), orbits))
    phases = (np.asarray(p["phases"], dtype=np.float64) if p["phases"] is not None
              else rng.uniform(0.0, 2 * math.pi, len(radii)))
    colors = rng.uniform(0.3, 1.0, (len(radii), c))
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    reach = stroke / 2.0 + 1.0
    period = n1 * n2 // math.gcd(n1, n2)
    img = np.zeros((c, h, w))
    for r0, phase, color in zip(radii, phases, colors):
        # >= 4 samples per pixel of arc, count divisible by both frequencies
        arc = 2 * math.pi * r0 * (1.0 + 2.0 * eta) * (1.0 + eta * (n1 + n2))
        count = period * max(1, math.ceil(4 * arc / period))
        xs, ys = contour_points(r0, eta, n1, n2, phase, cx, cy, count)
        dist = kernels.point_distance(xs, ys, h, w, reach)
        intensity = np.clip(reach - dist, 0.0, 1.0)
        img = np.maximum(img, color[:, None, None] * intensity[None])
    peak = img.max()
    return img / peak if peak > 0 else img


# ---------------------------------------------------------------------------
# shader-like expression trees
# ---------------------------------------------------------------------------

_LEAVES = ("u", "v", "const", "sin", "cos")
_NODES = ("add", "mul", "smin", "abs", "warp")


def random_expression(rng, depth):
    """Random smooth expression tree as nested tuples, ``depth`` levels at most."""
    if depth <= 1:
        kind = _LEAVES[rng.integers(len(_LEAVES))]
        if kind == "const":
            return ("const", float(rng.uniform(-1, 1)))
        if kind in ("sin", "cos"):
            a, b = rng.uniform(-3, 3, 2)
            return (kind, float(a), float(b), float(rng.uniform(0, 2 * math.pi)))
        return (kind,)
    kind = _NODES[rng.integers(len(_NODES))]
    child = lambda: random_expression(rng, depth - 1 if rng.random() < 0.75 else 1)  # noqa: E731
    if kind in ("add", "mul"):
        return (kind, child(), child())
    if kind == "smin":
        return (kind, child(), child(), float(rng.uniform(2, 12)))
    if kind == "abs":
        return (kind, child())
    return (kind, child(), float(rng.uniform(1, 4)), float(rng.uniform(0, 2 * math.pi)))


def evaluate_expression(expr, u, v):
    kind = expr[0]
    if kind == "u":
        return u
    if kind == "v":
        return v
    if kind == "const":
        return np.full_like(u, expr[1])
    if kind == "sin":
        return np.sin(2 * math.pi * (expr[1] * u + expr[2] * v) + expr[3])
    if kind == "cos":
        return np.cos(2 * math.pi * (expr[1] * u + expr[2] * v) + expr[3])
    if kind == "add":
        return evaluate_expression(expr[1], u, v) + evaluate_expression(expr[2], u, v)
    if kind == "mul":
        return evaluate_expression(expr[1], u, v) * evaluate_expression(expr[2], u, v)
    if kind == "smin":
        k = expr[3]
        a = evaluate_expression(expr[1], u, v)
        b = evaluate_expression(expr[2], u, v)
        return -np.logaddexp(-k * a, -k * b) / k
    if kind == "abs":
        return np.abs(evaluate_expression(expr[1], u, v))
    if kind == "warp":
        return np.sin(expr[2] * evaluate_expression(expr[1], u, v) + expr[3])
    raise ParameterError(f"unknown expression node {kind!r}")


def gen_shader_like(spec):
    p = spec.resolved()
    depth = int(p["depth"])
    if not 2 <= depth <= 8:
        raise ParameterError(f"expression depth must lie in [2, 8], got {depth}")
    h, w, c = spec.height, spec.width, spec.channels
    rng = make_rng(spec.seed)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    u /= w - 1
    v /= h - 1
    planes = []
    for _ in range(c):
        expr = p["expression"] if p["expression"] is not None else random_expression(rng, depth)
        planes.append(evaluate_expression(expr, u, v))
    return _minmax(np.stack(planes))


# ---------------------------------------------------------------------------
# dispatch and datasets
# ---------------------------------------------------------------------------

GENERATORS = {
    Family.DEAD_LEAVES: gen_dead_leaves,
    Family.SPECTRAL_NOISE: gen_spectral_noise,
    Family.MULTISCALE_NOISE: gen_multiscale_noise,
    Family.FRACTAL_IFS: gen_fractal_ifs,
    Family.VISUAL_ATOMS: gen_visual_atoms,
    Family.SHADER_LIKE: gen_shader_like,
}


def generate(spec):
    img = GENERATORS[spec.family](spec)
    if not np.all(np.isfinite(img)):
        raise GenerationError(f"{spec.family.value} produced non-finite values")
    return np.clip(img, 0.0, 1.0)


@dataclass
class DatasetManifest:
    name: str
    family: str
    width: int
    height: int
    channels: int
    seed: int
    files: list
    format: str = "ppm"
    params: dict = field(default_factory=dict)
    root: str = "."

    @property
    def count(self):
        return len(self.files)

    def paths(self):
        return [os.path.join(self.root, f["path"]) for f in self.files]

    def to_json(self):
        doc = dict(name=self.name, family=self.family, width=self.width, height=self.height,
                   channels=self.channels, seed=self.seed, count=self.count, format=self.format,
                   params=self.params, files=self.files)
        return json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def load_manifest(path):
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    files = doc["files"]
    if doc.get("count", len(files)) != len(files):
        raise ValueError(f"{path}: count {doc['count']} != {len(files)} listed files")
    if len({f["path"] for f in files}) != len(files):
        raise ValueError(f"{path}: duplicate file paths")
    return DatasetManifest(name=doc["name"], family=doc["family"], width=doc["width"],
                           height=doc["height"], channels=doc["channels"], seed=doc["seed"],
                           files=files, format=doc.get("format", "ppm"),
                           params=doc.get("params", {}), root=os.path.dirname(os.path.abspath(path)))


def _render_one(args):
    spec, index, path = args
    try:
        img = generate(spec)
    except GenerationError as exc:
        raise GenerationError(f"image {index}: {exc}", occupancy=exc.occupancy, index=index) from exc
    try:
        write_pnm(path, img)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def generate_dataset(spec, count, out_dir, name=None, workers=1):
    """Write ``count`` images plus ``manifest.json`` into ``out_dir``.

    Image ``i`` uses seed ``derive_seed(spec.seed, i)``, so the result does not
    depend on ``workers``.
    """
    if int(count) < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc.strerror or exc}") from exc
    ext = "ppm" if spec.channels == 3 else "pgm"
    files, jobs = [], []
    for i in range(int(count)):
        seed = derive_seed(spec.seed, i)
        rel = f"{i:06d}.{ext}"
        files.append({"path": rel, "seed": seed})
        jobs.append((replace(spec, seed=seed), i, os.path.join(out_dir, rel)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_render_one, jobs))
    else:
        for job in jobs:
            _render_one(job)
    manifest = DatasetManifest(name=name or f"{spec.family.value}-{spec.seed}", family=spec.family.value,
                               width=spec.width, height=spec.height, channels=spec.channels,
                               seed=int(spec.seed), files=files, format=ext,
                               params=dict(spec.params), root=os.path.abspath(out_dir))
    path = os.path.join(out_dir, "manifest.json")
    tmp = path + ".tmp"
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(manifest.to_json())
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return manifest
