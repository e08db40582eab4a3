"""Physically based single-bounce renderer, relighting, AO, material edits, compositing.

Shading sums over the probe pixels::

    L_o = sum_k (a / pi + f_r(k)) * L_k * v_k * max(w_k . n, 0) * dw_k

The specular reflectance ``f_r`` is achromatic and multiplies the RGB light.
All shading functions accept arrays or autodiff tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .brdf import eval_learned, eval_microfacet, rusinkiewicz
from .lighting import LightProbe, linear_to_srgb, probe_upper_mean
from .nnet import autodiff as ad


def specular(brdf_model, bparam, normal, light_dirs, wo):
    """Achromatic specular reflectance ``(B, K)``.

    ``brdf_model`` is a :class:`~invrender.brdf.BrdfLatentModel` (``bparam`` is
    a ``(B, 3)`` latent code) or ``None`` for the GGX variant (``bparam`` is a
    ``(B, 1)`` roughness).
    """
    n = ad.reshape(normal, (-1, 1, 3))
    wi = np.asarray(light_dirs)[None, :, :]
    o = np.asarray(wo)[:, None, :]
    if brdf_model is None:
        return eval_microfacet(ad.reshape(bparam, (-1, 1)), n, wi, o)
    coords = rusinkiewicz(n, wi, o, strict=False)
    z = ad.reshape(bparam, (-1, 1, 3))
    return eval_learned(brdf_model, z, coords)


def shade(normal, vis, albedo, spec, radiance, light_dirs, solid):
    """Outgoing radiance ``(B, 3)`` for ``B`` points against ``K`` probe pixels."""
    cos = ad.maximum(ad.matmul(normal, np.asarray(light_dirs).T), 0.0)
    w = ad.mul(ad.mul(vis, cos), np.asarray(solid))
    diffuse = ad.mul(ad.matmul(w, radiance), ad.mul(albedo, 1.0 / np.pi))
    if spec is None:
        return diffuse
    return ad.add(diffuse, ad.matmul(ad.mul(w, spec), radiance))


@dataclass
class ShadePointInputs:
    x_surf: np.ndarray
    normal: np.ndarray
    visibility: np.ndarray  # (K,)
    albedo: np.ndarray
    brdf_param: np.ndarray | None  # latent code, roughness, or None for Lambertian only
    wo: np.ndarray
    probe: LightProbe


def shade_point(inputs: ShadePointInputs, brdf_model=None, lambertian_only=False):
    rad, dirs, solid = inputs.probe.flat()
    vis = np.asarray(inputs.visibility, dtype=np.float64).reshape(1, -1)
    if vis.shape[1] != len(dirs):
        raise ValueError("visibility length must equal the probe pixel count")
    n = np.asarray(inputs.normal, dtype=np.float64).reshape(1, 3)
    spec = None
    if not lambertian_only and inputs.brdf_param is not None:
        spec = specular(brdf_model, np.asarray(inputs.brdf_param, dtype=np.float64).reshape(1, -1), n, dirs,
                        np.asarray(inputs.wo, dtype=np.float64).reshape(1, 3))
    out = shade(n, vis, np.asarray(inputs.albedo, dtype=np.float64).reshape(1, 3), spec, rad, dirs, solid)
    return np.asarray(out)[0]


@dataclass
class SurfaceFactors:
    """Per-point factors for ``N`` hit points."""

    normal: np.ndarray  # (N, 3)
    visibility: np.ndarray  # (N, K)
    albedo: np.ndarray  # (N, 3)
    brdf_param: np.ndarray  # (N, 3) codes or (N, 1) roughness


@dataclass
class RenderedView:
    hdr: np.ndarray  # (H, W, 3) linear
    alpha: np.ndarray  # (H, W)
    buffers: dict = field(default_factory=dict)  # normal, ao, albedo, z

    def display(self):
        return np.asarray(linear_to_srgb(self.hdr))


def shade_factors(factors: SurfaceFactors, wo, probe: LightProbe, brdf_model, chunk=1024):
    rad, dirs, solid = probe.flat()
    out = np.zeros((len(factors.normal), 3))
    for s in range(0, len(out), chunk):
        sl = slice(s, s + chunk)
        n = factors.normal[sl].astype(np.float64)
        spec = specular(brdf_model, factors.brdf_param[sl].astype(np.float64), n, dirs,
                        np.asarray(wo[sl], dtype=np.float64))
        out[sl] = shade(n, factors.visibility[sl].astype(np.float64), factors.albedo[sl].astype(np.float64),
                        spec, rad, dirs, solid)
    return out


def view_directions(camera):
    """Unit direction from each pixel's surface point back to the camera, ``(H, W, 3)``."""
    _, d = camera.rays()
    return -d


def render_view(source, geom, camera, probe: LightProbe, brdf_model=None, chunk=1024):
    """Render one view.

    ``source`` is a :class:`~invrender.factor.FactorModel` (or an edited view
    of one), or a callable ``(hit_mask) -> SurfaceFactors`` returning explicit
    per-pixel factors.  Only pixels that are hits in ``geom`` are shaded.
    """
    mask = geom.hit_mask()
    h, w = mask.shape
    wo = view_directions(camera)[mask]
    if hasattr(source, "predict"):
        _, dirs, _ = probe.flat()
        factors = source.predict(geom.x_surf[mask].astype(np.float64), dirs)
        brdf_model = source.brdf_model
    else:
        factors = source(mask)
    rgb = shade_factors(factors, wo, probe, brdf_model, chunk)
    hdr = np.zeros((h, w, 3))
    hdr[mask] = rgb
    buffers = {}
    for name, val in (("normal", factors.normal), ("albedo", factors.albedo), ("z", factors.brdf_param)):
        buf = np.zeros((h, w, val.shape[1]))
        buf[mask] = val
        buffers[name] = buf
    ao = np.zeros((h, w))
    ao[mask] = factors.visibility.mean(axis=1)
    buffers["ao"] = ao
    return RenderedView(hdr, mask.astype(np.float64), buffers)


def render_ao(model, geom, light_dirs=None):
    """Mean predicted visibility over the probe directions for each hit pixel."""
    mask = geom.hit_mask()
    dirs = model.light_dirs if light_dirs is None else light_dirs
    ao = np.zeros(mask.shape)
    if np.any(mask):
        ao[mask] = model.predict_visibility(geom.x_surf[mask].astype(np.float64), dirs).mean(axis=1)
    return ao


def explicit_factors(geom, albedo, brdf_param):
    """Factor source from per-pixel buffers (e.g. ground truth)."""

    def source(mask):
        return SurfaceFactors(geom.normal[mask], geom.visibility[mask], albedo[mask], brdf_param[mask])

    return source


# -- material editing ----------------------------------------------------------------


def turbo(t):
    """Polynomial approximation of the turbo colormap, ``t`` in [0, 1] -> RGB."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    r = (0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943)
    g = (0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604)
    b = (0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973)
    powers = t[..., None] ** np.arange(6)
    return np.clip(np.stack([powers @ np.array(c) for c in (r, g, b)], axis=-1), 0.0, 1.0)


@dataclass
class EditedModel:
    """Shading view of a model with albedo and/or BRDF code overridden.

    ``albedo`` is ``None`` (keep), an RGB triple, or a colormap callable of
    the x-coordinate normalized by ``x_range``.  ``code`` is ``None`` or a
    latent vector (e.g. ``brdf_model.code(name)``).
    """

    base: object
    albedo: object = None
    code: object = None
    x_range: tuple = (-1.0, 1.0)
    albedo_scale: object = None  # per-channel factor applied to predicted albedo

    @property
    def brdf_model(self):
        return self.base.brdf_model

    @property
    def light_dirs(self):
        return self.base.light_dirs

    def predict_visibility(self, x, dirs):
        return self.base.predict_visibility(x, dirs)

    def predict(self, x, dirs):
        f = self.base.predict(x, dirs)
        if self.albedo_scale is not None:
            f = replace(f, albedo=f.albedo * np.asarray(self.albedo_scale, dtype=np.float64))
        if self.albedo is not None:
            if callable(self.albedo):
                lo, hi = self.x_range
                a = self.albedo((x[:, 0] - lo) / (hi - lo))
            else:
                a = np.broadcast_to(np.asarray(self.albedo, dtype=np.float64), f.albedo.shape)
            f = replace(f, albedo=np.array(a, dtype=np.float64))
        if self.code is not None:
            f = replace(f, brdf_param=np.broadcast_to(np.asarray(self.code, dtype=f.brdf_param.dtype),
                                                      f.brdf_param.shape).copy())
        return f


def edit_material(model, albedo_override=None, z_override=None, x_range=(-1.0, 1.0), albedo_scale=None):
    if isinstance(z_override, str):
        z_override = model.brdf_model.code(z_override)
    return EditedModel(model, albedo_override, z_override, x_range, albedo_scale)


def composite(view: RenderedView, probe: LightProbe):
    """Tone-mapped render alpha-composited over the probe's upper-half mean color."""
    fg = view.display()
    bg = np.asarray(linear_to_srgb(probe_upper_mean(probe)))
    a = view.alpha[..., None]
    return a * fg + (1.0 - a) * bg
