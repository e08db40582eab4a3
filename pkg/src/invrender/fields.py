"""Density volumes and their distillation into surface geometry.

A density field maps points ``(N, 3)`` to non-negative densities ``(N,)`` in
inverse scene length.  Analytic primitives stand in for a trained radiance
field; voxel grids ingest one from disk.  Rays are integrated with a uniform
midpoint rule so every quantity is deterministic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from ._npz import save_npz
from .errors import DegenerateNormalError, FormatError, NumericDomainError

HIT_THRESHOLD = 0.5
DEFAULT_BOUNDS = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def _sig(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


class DensityField:
    """Base class.  Subclasses implement ``density`` and ``gradient``."""

    bounds = DEFAULT_BOUNDS

    def density(self, x):
        raise NotImplementedError

    def gradient(self, x):
        """Finite-difference fallback; analytic fields override it."""
        x = np.asarray(x, dtype=np.float64)
        h = 1e-5
        g = np.empty_like(x)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[:, k] = (self.density(x + e) - self.density(x - e)) / (2 * h)
        return g

    def to_dict(self):
        raise NotImplementedError


def _bounded(x, bounds):
    lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
    return np.all((x >= lo) & (x <= hi), axis=-1)


@dataclass
class ConstantField(DensityField):
    value: float = 1.0
    bounds: tuple = DEFAULT_BOUNDS

    def density(self, x):
        x = np.asarray(x)
        return np.where(_bounded(x, self.bounds), self.value, 0.0)

    def gradient(self, x):
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    def to_dict(self):
        return {"kind": "constant", "value": self.value, "bounds": self.bounds}


@dataclass
class SphereField(DensityField):
    """``density * sigmoid((radius - |x - c|) / softness)``; hard edge when softness is 0."""

    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    density_scale: float = 100.0
    softness: float = 0.01
    bounds: tuple = DEFAULT_BOUNDS

    def _r(self, x):
        return np.linalg.norm(np.asarray(x) - np.asarray(self.center), axis=-1)

    def density(self, x):
        r = self._r(x)
        if self.softness == 0:
            return np.where(r <= self.radius, self.density_scale, 0.0)
        return self.density_scale * _sig((self.radius - r) / self.softness)

    def gradient(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.softness == 0:
            return np.zeros_like(x)
        d = x - np.asarray(self.center)
        r = np.maximum(np.linalg.norm(d, axis=-1), 1e-12)
        s = _sig((self.radius - r) / self.softness)
        dsdr = -self.density_scale * s * (1.0 - s) / self.softness
        return (dsdr / r)[:, None] * d

    def to_dict(self):
        return {"kind": "sphere", "center": list(self.center), "radius": self.radius,
                "density": self.density_scale, "softness": self.softness, "bounds": self.bounds}


@dataclass
class BoxField(DensityField):
    """Product of per-axis soft indicators ``sigmoid((h_k - |x_k - c_k|) / softness)``.

    With ``half_size`` infinite along x and y this is a slab.
    """

    center: tuple = (0.0, 0.0, 0.0)
    half_size: tuple = (0.5, 0.5, 0.5)
    density_scale: float = 100.0
    softness: float = 0.01
    bounds: tuple = DEFAULT_BOUNDS

    def _factors(self, x):
        u = np.abs(np.asarray(x, dtype=np.float64) - np.asarray(self.center))
        h = np.asarray(self.half_size, dtype=np.float64)
        if self.softness == 0:
            return (u <= h).astype(np.float64)
        with np.errstate(invalid="ignore"):
            f = _sig((h - u) / self.softness)
        return np.where(np.isinf(h), 1.0, f)

    def density(self, x):
        return self.density_scale * np.prod(self._factors(x), axis=-1)

    def gradient(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.softness == 0:
            return np.zeros_like(x)
        f = self._factors(x)
        sign = np.sign(x - np.asarray(self.center))
        df = -sign * f * (1.0 - f) / self.softness
        g = np.empty_like(x)
        for k in range(3):
            others = np.prod(np.delete(f, k, axis=-1), axis=-1)
            g[:, k] = self.density_scale * df[:, k] * others
        return g

    def to_dict(self):
        return {"kind": "box", "center": list(self.center), "half_size": list(self.half_size),
                "density": self.density_scale, "softness": self.softness, "bounds": self.bounds}


def SlabField(z0, z1, density_scale=1.0, softness=0.0, bounds=DEFAULT_BOUNDS):
    """Layer ``z0 <= z <= z1`` unbounded in x and y (up to ``bounds``)."""
    return BoxField(center=(0.0, 0.0, 0.5 * (z0 + z1)), half_size=(np.inf, np.inf, 0.5 * (z1 - z0)),
                    density_scale=density_scale, softness=softness, bounds=bounds)


@dataclass
class GaussianField(DensityField):
    center: tuple = (0.0, 0.0, 0.0)
    width: float = 0.5
    peak: float = 10.0
    bounds: tuple = DEFAULT_BOUNDS

    def density(self, x):
        d = np.asarray(x) - np.asarray(self.center)
        return self.peak * np.exp(-0.5 * np.sum(d * d, axis=-1) / self.width ** 2)

    def gradient(self, x):
        d = np.asarray(x, dtype=np.float64) - np.asarray(self.center)
        return -(self.density(x) / self.width ** 2)[:, None] * d

    def to_dict(self):
        return {"kind": "gaussian", "center": list(self.center), "width": self.width,
                "peak": self.peak, "bounds": self.bounds}


@dataclass
class ExponentialField(DensityField):
    """``scale * exp(-direction . x)``."""

    direction: tuple = (0.0, 0.0, 1.0)
    scale: float = 1.0
    bounds: tuple = DEFAULT_BOUNDS

    def density(self, x):
        return self.scale * np.exp(-np.asarray(x) @ np.asarray(self.direction, dtype=np.float64))

    def gradient(self, x):
        return -self.density(x)[:, None] * np.asarray(self.direction, dtype=np.float64)

    def to_dict(self):
        return {"kind": "exponential", "direction": list(self.direction), "scale": self.scale,
                "bounds": self.bounds}


@dataclass
class SumField(DensityField):
    parts: list = dc_field(default_factory=list)
    bounds: tuple = DEFAULT_BOUNDS

    def density(self, x):
        x = np.asarray(x)
        return sum(p.density(x) for p in self.parts) * _bounded(x, self.bounds)

    def gradient(self, x):
        return sum(p.gradient(x) for p in self.parts)

    def to_dict(self):
        return {"kind": "sum", "parts": [p.to_dict() for p in self.parts], "bounds": self.bounds}


@dataclass
class ScaledField(DensityField):
    """View of ``base`` in normalized coordinates ``x_n = (x - center) * scale``."""

    base: DensityField
    center: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0

    @property
    def bounds(self):
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.base.bounds)
        c = np.asarray(self.center)
        return tuple((lo - c) * self.scale), tuple((hi - c) * self.scale)

    def _world(self, x):
        return np.asarray(x) / self.scale + np.asarray(self.center)

    def density(self, x):
        return self.base.density(self._world(x)) / self.scale

    def gradient(self, x):
        return self.base.gradient(self._world(x)) / self.scale ** 2

    def to_dict(self):
        return {"kind": "scaled", "base": self.base.to_dict(), "center": list(self.center),
                "scale": self.scale}


class VoxelGrid(DensityField):
    """Trilinearly interpolated densities on grid nodes spanning ``bounds``.

    ``values`` has shape ``(nx, ny, nz)``; node ``(i, j, k)`` sits at
    ``lo + (i, j, k) * (hi - lo) / (dims - 1)``.  Queries outside the bounds
    return 0.
    """

    def __init__(self, values, bounds=DEFAULT_BOUNDS):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 2:
            raise ValueError("voxel grid needs at least 2 nodes per axis")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("voxel densities must be finite and non-negative")
        self.values = values
        self.bounds = (tuple(float(b) for b in bounds[0]), tuple(float(b) for b in bounds[1]))
        self.lo = np.asarray(self.bounds[0])
        self.hi = np.asarray(self.bounds[1])
        self.dims = np.asarray(values.shape)
        self.cell = (self.hi - self.lo) / (self.dims - 1)

    def density(self, x):
        x = np.asarray(x, dtype=np.float64)
        inside = _bounded(x, self.bounds)
        u = (x - self.lo) / self.cell
        i0 = np.clip(np.floor(u).astype(np.int64), 0, self.dims - 2)
        f = np.clip(u - i0, 0.0, 1.0)
        v = self.values
        out = np.zeros(len(x))
        for dx in (0, 1):
            wx = f[:, 0] if dx else 1.0 - f[:, 0]
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1.0 - f[:, 1]
                for dz in (0, 1):
                    wz = f[:, 2] if dz else 1.0 - f[:, 2]
                    out += wx * wy * wz * v[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
        return np.where(inside, out, 0.0)

    def gradient(self, x):
        """Central differences with a half-voxel step."""
        x = np.asarray(x, dtype=np.float64)
        g = np.empty_like(x)
        for k in range(3):
            e = np.zeros(3)
            e[k] = 0.5 * self.cell[k]
            g[:, k] = (self.density(x + e) - self.density(x - e)) / self.cell[k]
        return g

    def to_dict(self):
        return {"kind": "voxel", "dims": self.dims.tolist(), "bounds": self.bounds}

    def to_bytes(self):
        dims = self.values.shape
        head = b"VOXF" + struct.pack("<3I", *dims) + struct.pack("<6f", *self.lo, *self.hi)
        # x-fastest order is Fortran order of an (nx, ny, nz) array
        return head + np.asarray(self.values, dtype="<f4").ravel(order="F").tobytes()

    @classmethod
    def from_bytes(cls, buf):
        buf = bytes(buf)
        if len(buf) < 40:
            raise FormatError("truncated voxel header", len(buf))
        if buf[:4] != b"VOXF":
            raise FormatError("bad voxel magic", 0)
        dims = struct.unpack("<3I", buf[4:16])
        b = struct.unpack("<6f", buf[16:40])
        n = dims[0] * dims[1] * dims[2]
        if len(buf) != 40 + 4 * n:
            raise FormatError(f"voxel payload should be {4 * n} bytes, got {len(buf) - 40}", 40)
        vals = np.frombuffer(buf, dtype="<f4", offset=40).reshape(dims, order="F")
        return cls(vals.astype(np.float64), (b[:3], b[3:]))


def field_from_dict(d, base_dir=None):
    kind = d["kind"]
    bounds = tuple(tuple(b) for b in d.get("bounds", DEFAULT_BOUNDS))
    if kind == "constant":
        return ConstantField(d["value"], bounds)
    if kind == "sphere":
        return SphereField(tuple(d["center"]), d["radius"], d["density"], d["softness"], bounds)
    if kind == "box":
        return BoxField(tuple(d["center"]), tuple(d["half_size"]), d["density"], d["softness"], bounds)
    if kind == "gaussian":
        return GaussianField(tuple(d["center"]), d["width"], d["peak"], bounds)
    if kind == "exponential":
        return ExponentialField(tuple(d["direction"]), d["scale"], bounds)
    if kind == "sum":
        return SumField([field_from_dict(p, base_dir) for p in d["parts"]], bounds)
    if kind == "scaled":
        return ScaledField(field_from_dict(d["base"], base_dir), tuple(d["center"]), d["scale"])
    if kind == "voxel_file":
        from pathlib import Path
        path = Path(base_dir or ".") / d["path"]
        return VoxelGrid.from_bytes(path.read_bytes())
    raise ValueError(f"unknown field kind {kind!r}")


def save_field(path, fld):
    with open(path, "w") as f:
        json.dump(fld.to_dict(), f, indent=1)


def load_field(path):
    from pathlib import Path
    path = Path(path)
    if path.suffix == ".voxf":
        return VoxelGrid.from_bytes(path.read_bytes())
    return field_from_dict(json.loads(path.read_text()), base_dir=path.parent)


# -- rays ---------------------------------------------------------------------


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = 1.0
    n_samples: int = 128

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not 0.0 <= self.t_near < self.t_far:
            raise ValueError("need 0 <= t_near < t_far")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")


@dataclass
class SurfaceSample:
    x_surf: np.ndarray
    accumulated_weight: float
    hit: bool
    depth: float


def _densities(fld, pts):
    flat = pts.reshape(-1, 3)
    sig = np.asarray(fld.density(flat), dtype=np.float64)
    if not np.all(np.isfinite(sig)):
        raise NumericDomainError("density", "non-finite density sample")
    return sig.reshape(pts.shape[:-1])


def march(fld, origins, dirs, t0, t1, n_samples, chunk=1 << 21):
    """Midpoint quadrature along many rays at once.

    Returns ``(optical_depth, weight_sum, weighted_t)`` per ray where the
    weights are ``T(t_i) sigma_i dt`` with ``T`` evaluated at the midpoints.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    t0 = np.broadcast_to(np.asarray(t0, dtype=np.float64), (n,))
    t1 = np.broadcast_to(np.asarray(t1, dtype=np.float64), (n,))
    tau = np.zeros(n)
    wsum = np.zeros(n)
    wt = np.zeros(n)
    step = max(1, chunk // max(n_samples, 1))
    frac = (np.arange(n_samples) + 0.5) / n_samples
    for s in range(0, n, step):
        sl = slice(s, s + step)
        dt = (t1[sl] - t0[sl]) / n_samples
        ts = t0[sl, None] + frac[None, :] * (t1[sl] - t0[sl])[:, None]
        pts = origins[sl, None, :] + ts[..., None] * dirs[sl, None, :]
        sig = _densities(fld, pts)
        sd = sig * dt[:, None]
        cum = np.cumsum(sd, axis=1)
        trans = np.exp(-(cum - 0.5 * sd))
        w = trans * sd
        tau[sl] = cum[:, -1]
        wsum[sl] = w.sum(axis=1)
        wt[sl] = (w * ts).sum(axis=1)
    return tau, wsum, wt


def transmittance(fld, ray: Ray, t):
    """``exp(-integral of density from t_near to t)`` with ``ray.n_samples`` segments."""
    if not ray.t_near <= t <= ray.t_far:
        raise ValueError("t outside [t_near, t_far]")
    if t == ray.t_near:
        return 1.0
    tau, _, _ = march(fld, ray.origin, ray.direction, ray.t_near, t, ray.n_samples)
    return float(np.exp(-tau[0]))


def expected_surface_points(fld, origins, dirs, t0, t1, n_samples, hit_threshold=HIT_THRESHOLD):
    """Batched expected termination.  Returns ``(x_surf, weight, hit, depth)``.

    Depth is the weight-normalized mean of the sample distances, so it always
    lies in ``[t0, t1]``; rays with weight below ``1e-6`` get depth ``t1``.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    _, wsum, wt = march(fld, origins, dirs, t0, t1, n_samples)
    t1 = np.broadcast_to(np.asarray(t1, dtype=np.float64), wsum.shape)
    ok = wsum > 1e-6
    depth = np.where(ok, wt / np.where(ok, wsum, 1.0), t1)
    x = origins + depth[:, None] * dirs
    return x, wsum, ok & (wsum >= hit_threshold), depth


def expected_surface_point(fld, ray: Ray, hit_threshold=HIT_THRESHOLD):
    x, w, hit, depth = expected_surface_points(fld, ray.origin, ray.direction, ray.t_near,
                                               ray.t_far, ray.n_samples, hit_threshold)
    return SurfaceSample(x[0], float(w[0]), bool(hit[0]), float(depth[0]))


def analytic_normals(fld, x, eps=1e-8):
    """``-grad sigma / |grad sigma|`` per point plus a validity mask."""
    g = np.asarray(fld.gradient(np.asarray(x, dtype=np.float64).reshape(-1, 3)))
    norm = np.linalg.norm(g, axis=-1)
    ok = norm > eps
    n = -g / np.where(ok, norm, 1.0)[:, None]
    return n, ok


def analytic_normal(fld, x):
    n, ok = analytic_normals(fld, x)
    if not ok[0]:
        raise DegenerateNormalError("density gradient vanishes")
    return n[0]


def ray_box_exit(origins, dirs, bounds):
    """Distance along each ray to where it leaves the box (0 if outside)."""
    lo, hi = np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tmax = np.nanmin(np.where(np.isnan(ta), np.inf, np.maximum(ta, tb)), axis=-1)
    return np.maximum(tmax, 0.0)


def ray_box_span(origins, dirs, bounds):
    """``(t_enter, t_exit, valid)`` against the axis-aligned ``bounds``."""
    lo, hi = np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tmin = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb)).max(axis=-1)
    tmax = np.where(np.isnan(ta), np.inf, np.maximum(ta, tb)).min(axis=-1)
    tmin = np.maximum(tmin, 0.0)
    return tmin, tmax, tmax > tmin


def visibility_path(x, dirs, bounds, n_samples):
    """Start offset and end distance used by :func:`trace_visibilities`."""
    t_exit = ray_box_exit(x, dirs, bounds)
    step = t_exit / n_samples
    return 2.0 * step, t_exit


def trace_visibilities(fld, x, dirs, n_samples=128, bounds=None):
    """Transmittance from ``x + 2 * step * w`` to the scene bound for each pair.

    ``x`` is ``(N, 3)`` and ``dirs`` ``(N, 3)``; the first two quadrature steps
    are skipped to avoid self-occlusion and the remaining ``n_samples - 2``
    segments are integrated.
    """
    bounds = fld.bounds if bounds is None else bounds
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t0, t1 = visibility_path(x, dirs, bounds, n_samples)
    vis = np.ones(len(x))
    live = t1 > t0
    if np.any(live):
        tau, _, _ = march(fld, x[live], dirs[live], t0[live], t1[live], max(n_samples - 2, 1))
        vis[live] = np.exp(-tau)
    return vis


def trace_visibility(fld, x_surf, w, n_samples=128, bounds=None):
    return float(trace_visibilities(fld, np.asarray(x_surf)[None], np.asarray(w)[None], n_samples, bounds)[0])


# -- distillation ----------------------------------------------------------------


@dataclass
class GeometryBuffers:
    """Per-pixel distilled geometry for one view (arrays are ``(H, W, ...)``)."""

    x_surf: np.ndarray
    normal: np.ndarray
    visibility: np.ndarray
    alpha: np.ndarray
    degenerate: np.ndarray
    meta: dict = dc_field(default_factory=dict)

    @property
    def height(self):
        return self.alpha.shape[0]

    @property
    def width(self):
        return self.alpha.shape[1]

    def hit_mask(self, threshold=HIT_THRESHOLD):
        return self.alpha >= threshold

    def save(self, path):
        save_npz(path, x_surf=self.x_surf, normal=self.normal, visibility=self.visibility,
                 alpha=self.alpha, degenerate=self.degenerate, meta=np.array(json.dumps(self.meta, sort_keys=True)))

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls(z["x_surf"], z["normal"], z["visibility"], z["alpha"], z["degenerate"],
                       json.loads(str(z["meta"])))


def distill_geometry_buffers(fld, camera, light_dirs, n_samples=256, vis_samples=128,
                             hit_threshold=HIT_THRESHOLD):
    """Expected surface, analytic normal and light visibility for every pixel.

    Pixels with a vanishing density gradient get the view-facing normal and
    are flagged in ``degenerate`` rather than raising.
    """
    origins, dirs = camera.rays()
    h, w = camera.height, camera.width
    origins = origins.reshape(-1, 3)
    dirs = dirs.reshape(-1, 3)
    t0, t1, valid = ray_box_span(origins, dirs, fld.bounds)
    x = np.zeros_like(origins)
    alpha = np.zeros(len(origins))
    hit = np.zeros(len(origins), dtype=bool)
    if np.any(valid):
        xv, wv, hv, _ = expected_surface_points(fld, origins[valid], dirs[valid], t0[valid], t1[valid],
                                                n_samples, hit_threshold)
        x[valid] = xv
        alpha[valid] = np.clip(wv, 0.0, 1.0)
        hit[valid] = hv
    light_dirs = np.asarray(light_dirs, dtype=np.float64).reshape(-1, 3)
    k = len(light_dirs)
    normal = np.zeros_like(origins)
    degenerate = np.zeros(len(origins), dtype=bool)
    vis = np.zeros((len(origins), k), dtype=np.float32)
    idx = np.flatnonzero(hit)
    if len(idx):
        n, ok = analytic_normals(fld, x[idx])
        n[~ok] = -dirs[idx][~ok]
        normal[idx] = n
        degenerate[idx] = ~ok
        pts = np.repeat(x[idx], k, axis=0)
        wd = np.tile(light_dirs, (len(idx), 1))
        vis[idx] = trace_visibilities(fld, pts, wd, vis_samples).reshape(len(idx), k)
    meta = {"n_samples": n_samples, "vis_samples": vis_samples, "hit_threshold": hit_threshold,
            "self_offset_steps": 2, "n_lights": k}
    return GeometryBuffers(x.reshape(h, w, 3).astype(np.float32), normal.reshape(h, w, 3).astype(np.float32),
                           vis.reshape(h, w, k), alpha.reshape(h, w).astype(np.float32),
                           degenerate.reshape(h, w), meta)
