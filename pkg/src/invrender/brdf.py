"""Measured BRDFs, Rusinkiewicz coordinates, the latent BRDF decoder and GGX.

MERL tables are indexed ``[channel, theta_h, theta_d, phi_d]`` with
90 x 90 x 180 bins; ``theta_h`` uses the square-root warp of the reference
reader so the specular peak gets more bins.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, DegenerateConfigurationError, FormatError
from .nnet import Adam, MlpConfig, PosEncConfig, init_mlp, mlp_forward, posenc
from .nnet import autodiff as ad
from .nnet import checkpoint

RES_THETA_H = 90
RES_THETA_D = 90
RES_PHI_D = 180
N_BINS = RES_THETA_H * RES_THETA_D * RES_PHI_D  # 1,458,000
MERL_SCALE = np.array([1.0 / 1500.0, 1.15 / 1500.0, 1.66 / 1500.0])
LUMINANCE = np.array([0.2126, 0.7152, 0.0722])
LATENT_DIM = 3
DEFAULT_F0 = 0.04
MIN_ROUGHNESS = 1e-3


def achromatize(rgb):
    """Rec. 709 relative luminance of linear RGB (last axis)."""
    return np.asarray(rgb, dtype=np.float64) @ LUMINANCE


@dataclass
class MerlBrdf:
    name: str
    raw: np.ndarray  # stored doubles, (3, 90, 90, 180), before channel scaling

    @property
    def table(self):
        """Scaled reflectance in 1/sr; negative entries mark invalid bins."""
        return self.raw * MERL_SCALE[:, None, None, None]

    @property
    def valid(self):
        return np.all(self.raw >= 0, axis=0)

    def achromatic(self):
        """``(valid_flat_indices, luminance)`` over valid bins."""
        valid = self.valid.ravel()
        tab = self.table.reshape(3, -1)[:, valid]
        return np.flatnonzero(valid), LUMINANCE @ tab


def parse_merl(buf, name="merl") -> MerlBrdf:
    buf = bytes(buf)
    if len(buf) < 12:
        raise FormatError("truncated MERL header", len(buf))
    dims = struct.unpack("<3i", buf[:12])
    if dims[0] * dims[1] * dims[2] != N_BINS:
        raise FormatError(f"MERL dimension product {dims} != {N_BINS}", 0)
    expected = 12 + 3 * N_BINS * 8
    if len(buf) != expected:
        raise FormatError(f"MERL payload should be {expected} bytes, got {len(buf)}", min(len(buf), expected))
    raw = np.frombuffer(buf, dtype="<f8", offset=12).reshape(3, RES_THETA_H, RES_THETA_D, RES_PHI_D).copy()
    return MerlBrdf(name, raw)


def merl_to_bytes(brdf: MerlBrdf) -> bytes:
    head = struct.pack("<3i", RES_THETA_H, RES_THETA_D, RES_PHI_D)
    return head + np.ascontiguousarray(brdf.raw, dtype="<f8").tobytes()


def merl_from_table(name, table):
    """Build a MERL record from scaled reflectance ``(3, 90, 90, 180)`` (negative = invalid)."""
    table = np.asarray(table, dtype=np.float64)
    raw = np.where(table < 0, -1.0, table / MERL_SCALE[:, None, None, None])
    return MerlBrdf(name, raw)


def load_merl_bank(directory):
    paths = sorted(Path(directory).glob("*.binary"))
    return [parse_merl(p.read_bytes(), p.stem) for p in paths]


# -- bin <-> coordinate helpers ------------------------------------------------------


def bin_coords():
    """Rusinkiewicz coordinates ``(phi_d, theta_h, theta_d)`` at every bin center, ``(N_BINS, 3)``."""
    th = ((np.arange(RES_THETA_H) + 0.5) / RES_THETA_H) ** 2 * (np.pi / 2)
    td = (np.arange(RES_THETA_D) + 0.5) / RES_THETA_D * (np.pi / 2)
    pd = (np.arange(RES_PHI_D) + 0.5) / RES_PHI_D * np.pi
    TH, TD, PD = np.meshgrid(th, td, pd, indexing="ij")
    return np.stack([PD.ravel(), TH.ravel(), TD.ravel()], axis=-1)


def bin_index(phi_d, theta_h, theta_d):
    """Flat table index for coordinates (reference reader's warps, clamped)."""
    th = np.clip((np.sqrt(np.clip(theta_h, 0, None) / (np.pi / 2)) * RES_THETA_H).astype(np.int64), 0, RES_THETA_H - 1)
    td = np.clip((theta_d / (np.pi / 2) * RES_THETA_D).astype(np.int64), 0, RES_THETA_D - 1)
    pd = np.mod(phi_d, np.pi)
    pd = np.clip((pd / np.pi * RES_PHI_D).astype(np.int64), 0, RES_PHI_D - 1)
    return (th * RES_THETA_D + td) * RES_PHI_D + pd


def rusink_to_dirs(phi_d, theta_h, theta_d):
    """Inverse transform with ``phi_h = 0`` in the frame where the normal is +z."""
    st, ct = np.sin(theta_d), np.cos(theta_d)
    d = np.stack([st * np.cos(phi_d), st * np.sin(phi_d), ct], axis=-1)
    o = d * np.array([-1.0, -1.0, 1.0])
    sh, ch = np.sin(theta_h)[..., None], np.cos(theta_h)[..., None]

    def rot_y(v):
        return np.stack([v[..., 0] * ch[..., 0] + v[..., 2] * sh[..., 0], v[..., 1],
                         -v[..., 0] * sh[..., 0] + v[..., 2] * ch[..., 0]], axis=-1)

    return rot_y(d), rot_y(o)


# -- Rusinkiewicz coordinates ----------------------------------------------------------


def tangent_frame(n):
    """Deterministic ``(t, b)`` from unit normals ``(..., 3)``.

    The helper axis is the canonical axis least aligned with ``n`` (first one
    on ties).  Works on tensors; the axis choice is treated as a constant.
    """
    nv = np.asarray(ad.value(n))
    axis = np.argmin(np.abs(nv), axis=-1)
    e = np.eye(3, dtype=nv.dtype)[axis]
    t = ad.normalize(ad.sub(e, ad.mul(ad.dot(e, n, keepdims=True), n)))
    b = cross(n, t)
    return t, b


def cross(a, b):
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return ad.stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def rusinkiewicz(n, wi, wo, strict=True, eps=1e-9):
    """``(phi_d, theta_h, theta_d)`` for broadcastable ``n``, ``wi``, ``wo`` of shape ``(..., 3)``.

    ``phi_d`` is folded into ``[0, pi)`` and set to 0 where ``theta_h`` is 0.
    With ``strict`` an antipodal ``wi``/``wo`` pair raises; otherwise the
    half vector is regularized (batched training evaluates every light,
    including ones below the horizon whose contribution is zero anyway).
    """
    t, b = tangent_frame(n)
    ix, iy, iz = ad.dot(wi, t), ad.dot(wi, b), ad.dot(wi, n)
    ox, oy, oz = ad.dot(wo, t), ad.dot(wo, b), ad.dot(wo, n)
    hx, hy, hz = ad.add(ix, ox), ad.add(iy, oy), ad.add(iz, oz)
    h2 = ad.value(hx) ** 2 + ad.value(hy) ** 2 + ad.value(hz) ** 2
    if strict and np.any(h2 < 1e-24):
        raise DegenerateConfigurationError("incoming and outgoing directions are antipodal")
    rho2 = ad.add(ad.square(hx), ad.square(hy))
    rho_ok = ad.value(rho2) > (eps * eps) * np.maximum(h2, 1e-30)
    rho = ad.sqrt(ad.where(rho_ok, rho2, 1.0))
    hlen = ad.sqrt(ad.add(ad.add(rho2, ad.square(hz)), 1e-30))
    theta_h = ad.where(rho_ok, ad.atan2(rho, hz), 0.0)
    cphi = ad.where(rho_ok, ad.div(hx, rho), 1.0)
    sphi = ad.where(rho_ok, ad.div(hy, rho), 0.0)
    cth = ad.div(hz, hlen)
    sth = ad.where(rho_ok, ad.div(rho, hlen), 0.0)
    # coordinates of wi in the half-vector frame
    d1 = ad.sub(ad.mul(cth, ad.add(ad.mul(ix, cphi), ad.mul(iy, sphi))), ad.mul(iz, sth))
    d2 = ad.sub(ad.mul(iy, cphi), ad.mul(ix, sphi))
    d3 = ad.div(ad.add(ad.add(ad.mul(ix, hx), ad.mul(iy, hy)), ad.mul(iz, hz)), hlen)
    theta_d = ad.atan2(ad.sqrt(ad.add(ad.add(ad.square(d1), ad.square(d2)), 1e-30)), d3)
    phi = ad.atan2(d2, d1)
    phi = ad.sub(phi, np.pi * np.floor(ad.value(phi) / np.pi))
    phi = ad.where(ad.value(phi) >= np.pi, 0.0, phi)
    phi_d = ad.where(rho_ok, phi, 0.0)
    return phi_d, theta_h, theta_d


# -- analytic microfacet ---------------------------------------------------------------


@dataclass(frozen=True)
class MicrofacetParams:
    roughness: float = 0.5
    f0: float = DEFAULT_F0


def microfacet_from_cosines(alpha, nwi, nwo, nh, wih, f0=DEFAULT_F0):
    """GGX * Smith * Schlick / (4 cos_i cos_o), zero below either horizon.

    Written with the Smith term folded into the denominator so grazing
    angles stay bounded.  ``alpha`` may be a tensor.
    """
    above = (ad.value(nwi) > 0) & (ad.value(nwo) > 0)
    ci = ad.maximum(nwi, 0.0)
    co = ad.maximum(nwo, 0.0)
    a2 = ad.square(ad.maximum(alpha, MIN_ROUGHNESS))
    c2 = ad.square(ad.maximum(nh, 0.0))
    denom = ad.add(ad.mul(c2, ad.sub(a2, 1.0)), 1.0)
    d = ad.div(a2, ad.mul(np.pi, ad.square(denom)))
    one_minus = ad.sub(1.0, a2)
    gi = ad.add(ci, ad.sqrt(ad.add(a2, ad.mul(one_minus, ad.square(ci)))))
    go = ad.add(co, ad.sqrt(ad.add(a2, ad.mul(one_minus, ad.square(co)))))
    fres = ad.add(f0, ad.mul(1.0 - f0, ad.power(ad.sub(1.0, ad.clip(wih, 0.0, 1.0)), 5)))
    val = ad.div(ad.mul(fres, d), ad.mul(gi, go))
    return ad.where(above, val, 0.0)


def eval_microfacet(p, n, wi, wo):
    """Achromatic GGX reflectance for unit ``n``, ``wi``, ``wo`` (broadcastable ``(..., 3)``).

    ``p`` is a :class:`MicrofacetParams` or a roughness array/tensor shaped
    like the broadcast leading axes.
    """
    alpha = p.roughness if isinstance(p, MicrofacetParams) else p
    f0 = p.f0 if isinstance(p, MicrofacetParams) else DEFAULT_F0
    h = ad.add(wi, wo)
    hv = ad.value(h)
    hn = np.sqrt(np.sum(hv * hv, axis=-1))
    ok = hn > 1e-9
    h = ad.normalize(h, eps=1e-30)
    val = microfacet_from_cosines(alpha, ad.dot(n, wi), ad.dot(n, wo), ad.dot(n, h), ad.dot(wi, h), f0)
    return ad.where(ok, val, 0.0)


# -- synthetic tables --------------------------------------------------------------------


def _table_from_function(name, fn):
    coords = bin_coords()
    wi, wo = rusink_to_dirs(coords[:, 0], coords[:, 1], coords[:, 2])
    valid = (wi[:, 2] > 0) & (wo[:, 2] > 0)
    vals = np.full(len(coords), -1.0)
    vals[valid] = fn(wi[valid], wo[valid])
    table = np.broadcast_to(vals.reshape(RES_THETA_H, RES_THETA_D, RES_PHI_D), (3, RES_THETA_H, RES_THETA_D, RES_PHI_D))
    return merl_from_table(name, table)


def lambertian_table(reflectance=0.5, name="lambertian"):
    return _table_from_function(name, lambda wi, wo: np.full(len(wi), reflectance / np.pi))


def ggx_table(roughness, f0=DEFAULT_F0, diffuse=0.0, name=None):
    n = np.array([0.0, 0.0, 1.0])
    name = name or f"ggx_{roughness:g}"

    def fn(wi, wo):
        return np.asarray(eval_microfacet(MicrofacetParams(roughness, f0), n, wi, wo)) + diffuse / np.pi

    return _table_from_function(name, fn)


# -- latent BRDF model -------------------------------------------------------------------


@dataclass
class BrdfLatentModel:
    """Frozen decoder ``(z, encoded coords) -> reflectance`` plus its code bank."""

    cfg: MlpConfig
    enc: PosEncConfig
    params: dict
    codes: np.ndarray  # (M, 3)
    names: list = field(default_factory=list)

    def code(self, name):
        return self.codes[self.names.index(name)]

    def save(self, path, meta=None):
        m = {"kind": "brdf_latent", "names": self.names, "width": self.cfg.width, "depth": self.cfg.depth,
             "skip_layer": self.cfg.skip_layer, "levels": self.enc.levels,
             "include_input": self.enc.include_input, **(meta or {})}
        checkpoint.save(path, {**self.params, "codes": self.codes}, meta=m)

    @classmethod
    def load(cls, path):
        params, _, meta = checkpoint.load(path)
        codes = params.pop("codes")
        enc = PosEncConfig(meta["levels"], meta["include_input"])
        cfg = decoder_config(meta["width"], meta["depth"], enc, meta["skip_layer"])
        return cls(cfg, enc, params, codes, list(meta["names"]))


def decoder_config(width=128, depth=4, enc=PosEncConfig(4, True), skip_layer=1):
    return MlpConfig(in_dim=LATENT_DIM + enc.out_dim(3), out_dim=1, width=width, depth=depth,
                     skip_layer=skip_layer, out_act="softplus")


def eval_learned(model: BrdfLatentModel, z, coords, params=None):
    """Achromatic reflectance for latent ``z (..., 3)`` and coords.

    ``coords`` is a ``(phi_d, theta_h, theta_d)`` tuple or an array
    ``(..., 3)`` in that order; ``z`` broadcasts against the coordinate axes.
    """
    if isinstance(coords, tuple):
        coords = ad.stack(list(coords), axis=-1)
    enc = posenc(coords, model.enc)
    out = mlp_forward(model.params if params is None else params, model.cfg, [z, enc])
    return out[..., 0]


@dataclass
class GloConfig:
    width: int = 128
    depth: int = 4
    levels: int = 4
    steps: int = 3000
    batch_per_material: int = 1024
    lr: float = 1e-3
    code_std: float = 0.01
    bins_per_material: int | None = None  # None: sample from all valid bins
    seed: int = 0
    dtype: str = "float32"


def _glo_loss(p, cfg, enc, codes_idx, coords, target_log):
    z = p["codes"][codes_idx]
    pred = eval_learned(BrdfLatentModel(cfg, enc, p, None), z, coords)
    diff = ad.sub(ad.log1p(pred), target_log)
    return ad.mean(ad.square(diff))


def glo_pretrain(materials, config: GloConfig | None = None, log=None):
    """Jointly fit decoder weights and one latent code per material.

    Minimizes the mean squared error between ``log(1 + r_pred)`` and
    ``log(1 + r_true)`` over valid achromatized bins; no penalty on the codes.
    """
    if not materials:
        raise ContractViolation("glo_pretrain needs at least one material")
    cfg_ = config or GloConfig()
    rng = np.random.default_rng(cfg_.seed)
    dt = np.dtype(cfg_.dtype)
    enc = PosEncConfig(cfg_.levels, True)
    cfg = decoder_config(cfg_.width, cfg_.depth, enc)
    params = init_mlp(cfg, rng, dtype=dt)
    params["codes"] = (rng.standard_normal((len(materials), LATENT_DIM)) * cfg_.code_std).astype(dt)
    all_coords = bin_coords().astype(dt)
    data = []
    for m in materials:
        idx, lum = m.achromatic()
        if cfg_.bins_per_material is not None and cfg_.bins_per_material < len(idx):
            keep = rng.choice(len(idx), cfg_.bins_per_material, replace=False)
            idx, lum = idx[keep], lum[keep]
        data.append((idx, np.log1p(np.maximum(lum, 0.0)).astype(dt)))
    # start from the constant log-space mean: zero output weights, bias at softplus^-1
    mean_r = np.expm1(np.mean([d[1].mean() for d in data]))
    params[f"w{cfg.depth}"][:] = 0
    params[f"b{cfg.depth}"][:] = np.log(np.expm1(max(mean_r, 1e-6)))
    opt = Adam(cfg_.lr)
    history = []
    b = cfg_.batch_per_material
    for step in range(cfg_.steps):
        mat = np.repeat(np.arange(len(materials)), b)
        picks = [rng.integers(0, len(idx), b) for idx, _ in data]
        coords = np.concatenate([all_coords[data[i][0][p]] for i, p in enumerate(picks)])
        target = np.concatenate([data[i][1][p] for i, p in enumerate(picks)])
        loss, grads = ad.grad(_glo_loss, params, cfg, enc, mat, coords, target)
        opt.step(params, grads)
        history.append(loss)
        if log is not None and (step % 500 == 0 or step == cfg_.steps - 1):
            log(f"glo step {step} loss {loss:.6f}")
    codes = params.pop("codes")
    model = BrdfLatentModel(cfg, enc, params, codes, [m.name for m in materials])
    model.history = history
    return model


def log_rmse(model, brdf: MerlBrdf, code=None, indices=None, chunk=200_000):
    """RMSE of ``log(1 + r)`` between the decoder and a table over valid bins."""
    idx, lum = brdf.achromatic()
    if indices is not None:
        keep = np.isin(idx, indices)
        idx, lum = idx[keep], lum[keep]
    z = model.code(brdf.name) if code is None else code
    coords = bin_coords()[idx]
    sq = 0.0
    for s in range(0, len(idx), chunk):
        c = coords[s:s + chunk].astype(np.float32)
        pred = eval_learned(model, np.asarray(z, dtype=np.float32)[None], c)
        sq += np.sum((np.log1p(pred.astype(np.float64)) - np.log1p(np.maximum(lum[s:s + chunk], 0))) ** 2)
    return float(np.sqrt(sq / max(len(idx), 1)))
