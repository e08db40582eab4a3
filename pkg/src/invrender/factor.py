"""Factorization networks, their losses and the staged training driver.

Four coordinate MLPs are evaluated at distilled surface points: normals,
per-light visibility, albedo and a BRDF latent code (or a GGX roughness).
Together with trainable probe pixels and the frozen BRDF decoder they render
the observed pixels through :mod:`invrender.render`.

Parameter names carry a group prefix (``normal/``, ``vis/``, ``albedo/``,
``brdf/``) and the probe lives under ``probe``; training stages select groups
by prefix.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .brdf import MIN_ROUGHNESS, BrdfLatentModel
from .errors import ContractViolation, NumericDomainError
from .lighting import LightProbe, linear_to_srgb, pixel_directions, probe_smoothness_loss, solid_angles
from .nnet import Adam, MlpConfig, PosEncConfig, init_mlp, mlp_forward, posenc
from .nnet import autodiff as ad
from .render import SurfaceFactors, shade, specular

log = logging.getLogger(__name__)

GROUPS = ("normal", "vis", "albedo", "brdf")
ALBEDO_SCALE = 0.77
ALBEDO_BIAS = 0.03


@dataclass
class LossWeights:
    normal_fit: float = 0.1
    normal_smooth: float = 0.05
    vis_fit: float = 0.1
    vis_smooth: float = 0.05
    albedo_smooth: float = 0.05
    brdf_smooth: float = 0.01
    light_smooth: float = 5e-6
    eps_std: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ContractViolation(f"loss weight {f.name} must be non-negative")

    def without_smoothness(self):
        return replace(self, normal_smooth=0.0, vis_smooth=0.0, albedo_smooth=0.0, brdf_smooth=0.0)


@dataclass
class FactorConfig:
    xyz_levels: int = 10
    dir_levels: int = 4
    width: int = 128
    depth: int = 4
    skip_layer: int = 1
    vis_width: int | None = None  # None: same as width
    probe_height: int = 16
    probe_width: int = 32
    probe_init: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    pretrain_epochs: int = 200
    joint_epochs: int = 100
    # None: an epoch is one pass over every training pixel
    steps_per_epoch: int | None = None
    batch_size: int = 1024
    lr_pretrain: float = 1e-3
    lr_joint: float = 5e-4
    lr_probe: float | None = None  # None: same as the network rate
    # lights used for the visibility smoothness term; None uses all of them
    vis_smooth_lights: int | None = None
    linear_recon: bool = False
    seed: int = 0
    dtype: str = "float32"
    no_smoothness: bool = False
    no_geom_pretrain: bool = False
    use_nerf_shape: bool = False
    microfacet_brdf: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.no_smoothness:
            self.weights = self.weights.without_smoothness()

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class FactorModel:
    """The four factor MLPs, the probe and a reference to the frozen BRDF decoder."""

    def __init__(self, config: FactorConfig, brdf_model: BrdfLatentModel | None, params=None, rng=None):
        if brdf_model is None and not config.microfacet_brdf:
            raise ContractViolation("a BRDF latent model is required unless microfacet_brdf is set")
        self.config = config
        self.brdf_model = None if config.microfacet_brdf else brdf_model
        self.xyz_enc = PosEncConfig(config.xyz_levels, True)
        self.dir_enc = PosEncConfig(config.dir_levels, True)
        exy = self.xyz_enc.out_dim(3)
        edir = self.dir_enc.out_dim(3)
        w, d, s = config.width, config.depth, config.skip_layer
        self.cfgs = {
            "normal": MlpConfig(exy, 3, w, d, s),
            "vis": MlpConfig(exy + edir, 1, config.vis_width or w, d, s, "sigmoid"),
            "albedo": MlpConfig(exy, 3, w, d, s),
            "brdf": MlpConfig(exy, 1 if config.microfacet_brdf else 3, w, d, s),
        }
        self.light_dirs = pixel_directions(config.probe_height, config.probe_width).reshape(-1, 3)
        self.solid = solid_angles(config.probe_height, config.probe_width).reshape(-1)
        if params is None:
            rng = np.random.default_rng(config.seed) if rng is None else rng
            dt = np.dtype(config.dtype)
            params = {}
            for g in GROUPS:
                params.update(init_mlp(self.cfgs[g], rng, prefix=f"{g}/", dtype=dt))
            params["probe"] = np.full((config.probe_height, config.probe_width, 3), config.probe_init, dtype=dt)
        self.params = params

    # -- factor heads (arrays or tensors) ---------------------------------------

    def _enc(self, x):
        return posenc(x, self.xyz_enc)

    def normal(self, p, enc):
        return ad.normalize(mlp_forward(p, self.cfgs["normal"], enc, "normal/"), eps=1e-12)

    def visibility(self, p, enc, dirs):
        """``(B, K)`` visibility for encoded points ``(B, e)`` and directions ``(K, 3)``."""
        b, e = np.shape(ad.value(enc))
        pieces = [ad.reshape(enc, (b, 1, e)), posenc(np.asarray(dirs, dtype=ad.value(enc).dtype), self.dir_enc)[None]]
        out = mlp_forward(p, self.cfgs["vis"], pieces, "vis/")
        return ad.reshape(out, (b, len(dirs)))

    def albedo(self, p, enc):
        return ad.add(ad.mul(ad.sigmoid(mlp_forward(p, self.cfgs["albedo"], enc, "albedo/")), ALBEDO_SCALE),
                      ALBEDO_BIAS)

    def brdf_param(self, p, enc):
        raw = mlp_forward(p, self.cfgs["brdf"], enc, "brdf/")
        if self.config.microfacet_brdf:
            return ad.add(ad.mul(ad.sigmoid(raw), 1.0 - MIN_ROUGHNESS), MIN_ROUGHNESS)
        return raw

    def probe_radiance(self, p):
        return ad.reshape(p["probe"], (-1, 3))

    def probe(self):
        return LightProbe(np.maximum(np.asarray(self.params["probe"], dtype=np.float64), 0.0))

    # -- inference ----------------------------------------------------------------

    def predict_visibility(self, x, dirs, chunk=256):
        x = np.asarray(x, dtype=self.params["probe"].dtype)
        out = np.zeros((len(x), len(dirs)))
        for s in range(0, len(x), chunk):
            out[s:s + chunk] = self.visibility(self.params, self._enc(x[s:s + chunk]), dirs)
        return out

    def predict(self, x, dirs=None, chunk=256):
        """Factors at points ``x (N, 3)``; visibility is queried at ``dirs``."""
        dirs = self.light_dirs if dirs is None else dirs
        x = np.asarray(x, dtype=self.params["probe"].dtype)
        parts = {"normal": [], "albedo": [], "brdf": []}
        for s in range(0, len(x), chunk):
            enc = self._enc(x[s:s + chunk])
            parts["normal"].append(self.normal(self.params, enc))
            parts["albedo"].append(self.albedo(self.params, enc))
            parts["brdf"].append(self.brdf_param(self.params, enc))
        cat = {k: (np.concatenate(v).astype(np.float64) if v else np.zeros((0, 3))) for k, v in parts.items()}
        return SurfaceFactors(cat["normal"], self.predict_visibility(x, dirs, chunk), cat["albedo"], cat["brdf"])

    def group_names(self, *groups):
        pre = tuple(f"{g}/" for g in groups)
        return [k for k in self.params if k.startswith(pre) or (k == "probe" and "probe" in groups)]

    def copy(self):
        return FactorModel(self.config, self.brdf_model, {k: v.copy() for k, v in self.params.items()})


# -- data ------------------------------------------------------------------------------


@dataclass
class TrainBatch:
    x: np.ndarray  # (B, 3) surface points
    eps: np.ndarray  # (B, 3) displacements
    target: np.ndarray  # (B, 3) observed pixel colors (sRGB in [0, 1])
    wo: np.ndarray  # (B, 3) unit directions toward the camera
    normal_target: np.ndarray  # (B, 3) distilled normals
    vis_target: np.ndarray  # (B, K) distilled visibility
    light_dirs: np.ndarray  # (K, 3)
    solid: np.ndarray  # (K,)
    smooth_lights: np.ndarray | None = None  # light indices for visibility smoothness

    def __post_init__(self):
        b = len(self.x)
        for name in ("eps", "target", "wo", "normal_target", "vis_target"):
            if len(getattr(self, name)) != b:
                raise ContractViolation(f"batch field {name} has the wrong length")
        if self.vis_target.shape[1] != len(self.light_dirs):
            raise ContractViolation("visibility targets must cover every light")


@dataclass
class TrainingData:
    """Every training hit pixel with its distilled geometry."""

    x: np.ndarray
    target: np.ndarray
    wo: np.ndarray
    normal_target: np.ndarray
    vis_target: np.ndarray
    light_dirs: np.ndarray
    solid: np.ndarray

    def __len__(self):
        return len(self.x)

    @classmethod
    def from_views(cls, views, light_dirs, solid):
        """``views`` yields ``(GeometryBuffers, image (H, W, 3) in [0, 1], wo (H, W, 3))``."""
        xs, ts, wos, ns, vs = [], [], [], [], []
        for geom, img, wo in views:
            m = geom.hit_mask()
            xs.append(geom.x_surf[m])
            ts.append(img[m])
            wos.append(wo[m])
            ns.append(geom.normal[m])
            vs.append(geom.visibility[m])
        if not xs or sum(len(x) for x in xs) == 0:
            raise ContractViolation("no hit pixels in the training views")
        cat = [np.concatenate(a).astype(np.float32) for a in (xs, ts, wos, ns, vs)]
        return cls(*cat, np.asarray(light_dirs, dtype=np.float32), np.asarray(solid, dtype=np.float32))

    def batch(self, idx, rng, eps_std, dtype=np.float32, smooth_lights=None):
        k = len(self.light_dirs)
        sl = None
        if smooth_lights is not None and smooth_lights < k:
            sl = np.sort(rng.choice(k, smooth_lights, replace=False))
        return TrainBatch(self.x[idx].astype(dtype), (rng.standard_normal((len(idx), 3)) * eps_std).astype(dtype),
                          self.target[idx].astype(dtype), self.wo[idx].astype(dtype), self.normal_target[idx].astype(dtype),
                          self.vis_target[idx].astype(dtype), self.light_dirs.astype(dtype), self.solid.astype(dtype), sl)


# -- losses ----------------------------------------------------------------------------


def _l1_rows(a, b):
    return ad.sum_(ad.abs_(ad.sub(a, b)), axis=-1)


def _sq_rows(a, b):
    return ad.sum_(ad.square(ad.sub(a, b)), axis=-1)


def _displaced(batch):
    return (batch.x + batch.eps).astype(batch.x.dtype)


class _Eval:
    """Lazily evaluated network outputs for one batch, shared between loss terms."""

    def __init__(self, model, p, batch):
        self.model, self.p, self.batch = model, p, batch
        self._cache = {}

    def get(self, key):
        if key not in self._cache:
            self._cache[key] = self._compute(key)
        return self._cache[key]

    def _compute(self, key):
        m, p, b = self.model, self.p, self.batch
        if key == "enc":
            return m._enc(b.x)
        if key == "enc_eps":
            return m._enc(_displaced(b))
        name, _, where = key.partition("@")
        enc = self.get("enc_eps" if where == "eps" else "enc")
        if name == "normal":
            return m.normal(p, enc)
        if name == "albedo":
            return m.albedo(p, enc)
        if name == "brdf":
            return m.brdf_param(p, enc)
        if name == "vis":
            return m.visibility(p, enc, b.light_dirs)
        if name == "vis_sub":
            return m.visibility(p, enc, b.light_dirs[b.smooth_lights])
        raise KeyError(key)


def _normal_term(ev, w: LossWeights):
    n = ev.get("normal")
    out = ad.mul(_sq_rows(n, ev.batch.normal_target), w.normal_fit / 3.0)
    if w.normal_smooth > 0:
        out = ad.add(out, ad.mul(_l1_rows(n, ev.get("normal@eps")), w.normal_smooth / 3.0))
    return ad.mean(out)


def _vis_term(ev, w: LossWeights):
    v = ev.get("vis")
    out = ad.mul(_sq_rows(v, ev.batch.vis_target), w.vis_fit)
    if w.vis_smooth > 0:
        if ev.batch.smooth_lights is None:
            sm = _l1_rows(v, ev.get("vis@eps"))
        else:
            # unbiased estimate of the full sum over lights
            k = len(ev.batch.light_dirs)
            sub = ad.getitem(v, (slice(None), ev.batch.smooth_lights))
            sm = ad.mul(_l1_rows(sub, ev.get("vis_sub@eps")), k / len(ev.batch.smooth_lights))
        out = ad.add(out, ad.mul(sm, w.vis_smooth))
    return ad.mean(out)


def _smooth_term(ev, name, weight):
    if weight == 0:
        return 0.0
    a = ev.get(name)
    dim = np.shape(ad.value(a))[-1]
    return ad.mul(ad.mean(_l1_rows(a, ev.get(f"{name}@eps"))), weight / dim)


def _render(ev):
    m, p, b = ev.model, ev.p, ev.batch
    n = ev.get("normal")
    spec = specular(m.brdf_model, ev.get("brdf"), n, b.light_dirs, b.wo)
    return shade(n, ev.get("vis"), ev.get("albedo"), spec, m.probe_radiance(p), b.light_dirs, b.solid)


def loss_recon(rendered, target, linear=False):
    """Mean squared error between tone-mapped renders and targets."""
    pred = rendered if linear else linear_to_srgb(rendered)
    return ad.mean(ad.square(ad.sub(pred, target)))


def loss_normal(model, batch, params=None):
    return _normal_term(_Eval(model, model.params if params is None else params, batch), model.config.weights)


def loss_visibility(model, batch, params=None):
    return _vis_term(_Eval(model, model.params if params is None else params, batch), model.config.weights)


def loss_albedo_smooth(model, batch, params=None):
    ev = _Eval(model, model.params if params is None else params, batch)
    return _smooth_term(ev, "albedo", model.config.weights.albedo_smooth)


def loss_z_smooth(model, batch, params=None):
    """Smoothness of the BRDF code (normalized by the code dimension)."""
    ev = _Eval(model, model.params if params is None else params, batch)
    return _smooth_term(ev, "brdf", model.config.weights.brdf_smooth)


def loss_light(model, params=None):
    p = model.params if params is None else params
    return probe_smoothness_loss(p["probe"], model.config.weights.light_smooth)


def loss_terms(model, batch, params=None):
    """All loss components as a dict of scalars (tensors when ``params`` are tensors)."""
    p = model.params if params is None else params
    w = model.config.weights
    ev = _Eval(model, p, batch)
    return {
        "recon": loss_recon(_render(ev), batch.target, model.config.linear_recon),
        "normal": _normal_term(ev, w),
        "vis": _vis_term(ev, w),
        "albedo": _smooth_term(ev, "albedo", w.albedo_smooth),
        "brdf": _smooth_term(ev, "brdf", w.brdf_smooth),
        "light": probe_smoothness_loss(p["probe"], w.light_smooth),
    }


def total_loss(model, batch, params=None):
    terms = loss_terms(model, batch, params)
    out = 0.0
    for v in terms.values():
        out = ad.add(out, v)
    return out


def pretrain_loss(model, batch, params=None):
    """Plain fit of the normal and visibility heads to the distilled targets."""
    terms = _pretrain_terms(model, batch, model.params if params is None else params)
    return ad.add(terms["normal"], terms["vis"])


def grad_of(fn, model, batch, names):
    """Loss value, gradients for ``names`` and the float components (if any)."""
    p = {k: (ad.Tensor(v) if k in names else v) for k, v in model.params.items()}
    out = fn(model, batch, p)
    parts = None
    if isinstance(out, dict):
        parts = {k: float(np.asarray(ad.value(v))) for k, v in out.items()}
        tot = 0.0
        for v in out.values():
            tot = ad.add(tot, v)
        out = tot
    lv = float(np.asarray(ad.value(out)))
    if not np.isfinite(lv):
        raise NumericDomainError("loss", "non-finite training loss")
    if isinstance(out, ad.Tensor):
        out.backward()
    grads = {k: (np.zeros_like(model.params[k]) if p[k].grad is None else p[k].grad.astype(model.params[k].dtype))
             for k in names}
    return lv, grads, parts


# -- training ---------------------------------------------------------------------------


class TrainingAborted(NumericDomainError):
    """Raised when a loss turns non-finite; ``model`` holds the last good parameters."""

    def __init__(self, model, epoch, step):
        self.model = model
        self.epoch = epoch
        self.step = step
        super().__init__("loss", f"non-finite loss at epoch {epoch} step {step}; kept last good state")


def _epoch_batches(n, batch_size, steps, rng):
    perm = rng.permutation(n)
    if steps is None:
        return [perm[s:s + batch_size] for s in range(0, n, batch_size)]
    out = []
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            perm = rng.permutation(n)
            pos = 0
        out.append(perm[pos:pos + batch_size])
        pos += batch_size
    return out


def _run_stage(model, data, epochs, names, loss_fn, lr, rng, clamp_probe, log_rows, on_epoch=None):
    cfg = model.config
    dt = np.dtype(cfg.dtype)
    lr_probe = cfg.lr_probe if cfg.lr_probe is not None else lr
    opt = Adam(lambda k: lr_probe if k == "probe" else lr)
    good = {k: v.copy() for k, v in model.params.items()}
    bs = min(cfg.batch_size, len(data))
    for epoch in range(1, epochs + 1):
        sums = {}
        nb = 0
        for step, idx in enumerate(_epoch_batches(len(data), bs, cfg.steps_per_epoch, rng)):
            batch = data.batch(idx, rng, cfg.weights.eps_std, dt, cfg.vis_smooth_lights)
            try:
                lv, grads, parts = grad_of(loss_fn, model, batch, names)
            except NumericDomainError:
                model.params = good
                raise TrainingAborted(model, epoch, step) from None
            opt.step(model.params, grads, names)
            if clamp_probe and "probe" in names:
                np.maximum(model.params["probe"], 0.0, out=model.params["probe"])
            if not all(np.all(np.isfinite(model.params[k])) for k in names):
                model.params = good
                raise TrainingAborted(model, epoch, step)
            for k, v in (parts or {"total": lv}).items():
                sums[k] = sums.get(k, 0.0) + v
            sums["total"] = sums.get("total", 0.0) + (lv if parts else 0.0)
            nb += 1
        good = {k: v.copy() for k, v in model.params.items()}
        row = {"epoch": epoch, **{k: v / nb for k, v in sums.items()}}
        log_rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return model


def _pretrain_terms(model, batch, p):
    w = model.config.weights
    ev = _Eval(model, p, batch)
    return {
        "normal": ad.mean(ad.mul(_sq_rows(ev.get("normal"), batch.normal_target), w.normal_fit / 3.0)),
        "vis": ad.mean(ad.mul(_sq_rows(ev.get("vis"), batch.vis_target), w.vis_fit)),
    }


def pretrain_geometry(model, data: TrainingData, epochs=None, rng=None, on_epoch=None):
    """Fit the normal and visibility heads to the distilled buffers; returns the log rows."""
    cfg = model.config
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    rng = np.random.default_rng(cfg.seed + 1) if rng is None else rng
    rows = []
    _run_stage(model, data, epochs, model.group_names("normal", "vis"), _pretrain_terms, cfg.lr_pretrain,
               rng, False, rows, on_epoch)
    return rows


def joint_optimize(model, data: TrainingData, epochs=None, rng=None, on_epoch=None):
    """Optimize every factor head and the probe under the total loss; returns the log rows.

    With ``use_nerf_shape`` the normal and visibility heads stay frozen.
    """
    cfg = model.config
    epochs = cfg.joint_epochs if epochs is None else epochs
    rng = np.random.default_rng(cfg.seed + 2) if rng is None else rng
    groups = ("albedo", "brdf", "probe") if cfg.use_nerf_shape else ("normal", "vis", "albedo", "brdf", "probe")
    rows = []
    _run_stage(model, data, epochs, model.group_names(*groups), loss_terms, cfg.lr_joint, rng, True, rows,
               on_epoch)
    return rows


def train(model, data, on_epoch=None):
    """Both stages as configured; returns ``(pretrain_rows, joint_rows)``."""
    pre = [] if model.config.no_geom_pretrain else pretrain_geometry(model, data, on_epoch=on_epoch)
    return pre, joint_optimize(model, data, on_epoch=on_epoch)


LOG_COLUMNS = ("stage", "epoch", "total", "recon", "normal", "vis", "albedo", "brdf", "light")


def write_log_csv(path, pretrain_rows, joint_rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, restval="")
        w.writeheader()
        for stage, rows in (("pretrain", pretrain_rows), ("joint", joint_rows)):
            for r in rows:
                w.writerow({"stage": stage, **{k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()}})


# -- persistence ------------------------------------------------------------------------


def save_model(model, path, extra_meta=None):
    from .nnet import checkpoint

    meta = {"kind": "factor_model", "config": model.config.to_dict(), **(extra_meta or {})}
    checkpoint.save(path, model.params, meta=meta)


def load_model(path, brdf_model):
    from .nnet import checkpoint

    params, _, meta = checkpoint.load(path)
    cfg = FactorConfig.from_dict(meta["config"])
    dt = np.dtype(cfg.dtype)
    return FactorModel(cfg, brdf_model, {k: v.astype(dt, copy=False) for k, v in params.items()})
