"""Stage functions shared by the command line and the demos.

Each stage reads the artifacts of earlier stages from directories and writes
its own outputs plus a ``config.json`` snapshot.  Missing inputs raise
:class:`~invrender.errors.MissingArtifactError` naming the stage to run.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .brdf import BrdfLatentModel, GloConfig, ggx_table, glo_pretrain, lambertian_table
from .errors import MissingArtifactError
from .factor import FactorConfig, FactorModel, TrainingData, load_model, save_model, train, write_log_csv
from .fields import GeometryBuffers, distill_geometry_buffers
from .lighting import LightProbe, load_probe, make_olat, pixel_directions, save_pfm, solid_angles
from .metrics import EvalReport, albedo_scale_correct, normal_angle, psnr, ssim, total_variation
from .render import composite, edit_material, render_view, turbo
from .scene_io import (
    FixtureSpec,
    generate_fixture,
    load_fixture_spec,
    load_gt_geometry,
    load_scene,
    png_write,
    render_gt,
    to_uint8,
)

# Desk-scale settings: the fixture trains in minutes on one core with these.
DESK_GLO = {"width": 64}
DESK_FACTOR = {
    "width": 64,
    "batch_size": 128,
    "probe_height": 8,
    "probe_width": 16,
    "steps_per_epoch": 15,
    "lr_probe": 0.02,
    "vis_smooth_lights": 32,
}


def desk_glo_config(**overrides):
    return GloConfig(**{**DESK_GLO, **overrides})


def desk_factor_config(**overrides):
    return FactorConfig.from_dict({**DESK_FACTOR, **overrides})


BRDF_FILE = "brdf.ckpt"
MODEL_FILE = "model.ckpt"
CONFIG_FILE = "config.json"


def write_config(out_dir, config: dict):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(json.dumps(config, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, (np.ndarray, tuple)):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _require(path, artifact, stage):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{artifact} ({path})", stage)
    return path


# -- BRDF prior ------------------------------------------------------------------------

SYNTHETIC_BANK = ("lambertian", "ggx_0.1", "ggx_0.2", "ggx_0.3", "ggx_0.5")


def synthetic_materials(names=SYNTHETIC_BANK):
    """Tabulated Lambertian and GGX materials named ``lambertian`` / ``ggx_<roughness>``."""
    mats = []
    for n in names:
        if n == "lambertian":
            mats.append(lambertian_table(0.5, n))
        else:
            mats.append(ggx_table(float(n.split("_", 1)[1]), name=n))
    return mats


def brdf_pretrain(out_dir, config: GloConfig, materials=None, log=None):
    mats = synthetic_materials() if materials is None else materials
    model = glo_pretrain(mats, config, log)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / BRDF_FILE, {"final_loss": float(model.history[-1])})
    write_config(out, {"stage": "brdf-pretrain", "glo": config.__dict__, "materials": [m.name for m in mats]})
    return model


def load_brdf(path):
    path = Path(path)
    if path.is_dir():
        path = path / BRDF_FILE
    return BrdfLatentModel.load(_require(path, "BRDF checkpoint", "brdf-pretrain"))


# -- fixture / distill --------------------------------------------------------------------


def synth(out_dir, spec: FixtureSpec, brdf_model=None, log=None):
    manifest = generate_fixture(spec, out_dir, brdf_model, log)
    return manifest


def distill(scene_dir, out_dir, n_samples=192, vis_samples=64, probe_resolution=None, log=None):
    """Geometry buffers for every view of the scene (``<view>.npz``)."""
    ds = load_scene(_require(Path(scene_dir) / "manifest.json", "scene manifest", "synth"))
    fld = ds.field()
    h, w = probe_resolution or ds.probe_resolution
    dirs = pixel_directions(h, w).reshape(-1, 3)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for v in ds.views:
        geom = distill_geometry_buffers(fld, ds.camera(v), dirs, n_samples, vis_samples)
        geom.save(out / f"{v.name}.npz")
        if log is not None:
            log(f"distilled {v.name}: {int(geom.hit_mask().sum())} hits")
    write_config(out, {"stage": "distill", "scene": str(scene_dir), "n_samples": n_samples,
                       "vis_samples": vis_samples, "probe_resolution": [h, w]})
    return out


def load_buffers(distill_dir, view_name):
    return GeometryBuffers.load(_require(Path(distill_dir) / f"{view_name}.npz", "geometry buffers", "distill"))


def training_data(scene_dir, distill_dir, split="train"):
    ds = load_scene(_require(Path(scene_dir) / "manifest.json", "scene manifest", "synth"))
    views = []
    for v in ds.split(split):
        geom = load_buffers(distill_dir, v.name)
        img = ds.image(v)[..., :3]
        _, d = ds.camera(v).rays()
        views.append((geom, img, -d))
    h, w = ds.probe_resolution
    k = views[0][0].visibility.shape[-1]
    if k != h * w:
        h, w = _probe_shape_for(k, h, w)
    return TrainingData.from_views(views, pixel_directions(h, w).reshape(-1, 3), solid_angles(h, w).reshape(-1))


def _probe_shape_for(k, h, w):
    h2 = int(round(np.sqrt(k / 2)))
    return h2, k // h2


# -- training ----------------------------------------------------------------------------


def train_model(scene_dir, distill_dir, brdf_model, config: FactorConfig, out_dir=None, init_params=None,
                on_epoch=None, data=None):
    """Run both stages.  ``init_params`` (e.g. a shared pretrained geometry state) skips nothing by itself;
    pass ``config.no_geom_pretrain=True`` alongside it to reuse a pretrained model."""
    data = training_data(scene_dir, distill_dir) if data is None else data
    model = FactorModel(config, brdf_model)
    if init_params is not None:
        model.params.update({k: v.copy() for k, v in init_params.items()})
    pre, joint = train(model, data, on_epoch)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_model(model, out / MODEL_FILE)
        write_log_csv(out / "log.csv", pre, joint)
        write_config(out, {"stage": "train", "scene": str(scene_dir), "distill": str(distill_dir),
                           "factor": config.to_dict()})
    return model, pre, joint


def load_factor_model(path, brdf_model):
    path = Path(path)
    if path.is_dir():
        path = path / MODEL_FILE
    return load_model(_require(path, "factor model", "train"), brdf_model)


# -- evaluation ---------------------------------------------------------------------------


@dataclass
class ViewEval:
    name: str
    split: str
    recon_psnr: float
    albedo_psnr: float
    normal_deg: float
    normal_tv: float
    ssim: float


def _fixture_spec(scene_dir):
    spec = load_fixture_spec(scene_dir)
    if spec is None:
        raise MissingArtifactError(f"fixture ground truth ({Path(scene_dir) / 'fixture.json'})", "synth")
    return spec


def albedo_scales(model, scene_dir, distill_dir, split="train"):
    """Per-channel scale correcting predicted albedo toward the ground truth, pooled over views."""
    ds = load_scene(Path(scene_dir) / "manifest.json")
    spec = _fixture_spec(scene_dir)
    preds, gts = [], []
    from .scene_io import fixture_albedo
    for v in ds.split(split):
        geom = load_buffers(distill_dir, v.name)
        m = geom.hit_mask()
        preds.append(model.predict(geom.x_surf[m].astype(np.float64)).albedo)
        gts.append(fixture_albedo(spec, geom.x_surf[m]))
    _, s = albedo_scale_correct(np.concatenate(preds), np.concatenate(gts))
    return s


def evaluate(model, scene_dir, distill_dir, splits=("train", "test")):
    """Per-view reconstruction, albedo and normal metrics against the fixture ground truth."""
    from .scene_io import fixture_albedo

    ds = load_scene(Path(scene_dir) / "manifest.json")
    spec = _fixture_spec(scene_dir)
    probe = model.probe()
    s = albedo_scales(model, scene_dir, distill_dir)
    report = EvalReport()
    views = []
    for v in ds.views:
        if v.split not in splits:
            continue
        geom = load_buffers(distill_dir, v.name)
        gt_geom = load_gt_geometry(scene_dir, v.name)
        m = geom.hit_mask()
        cam = ds.camera(v)
        view = render_view(model, geom, cam, probe)
        img = ds.image(v)[..., :3]
        pred = view.display()
        rp = psnr(pred, img, m)
        gt_alb = np.zeros_like(view.buffers["albedo"])
        gt_alb[m] = fixture_albedo(spec, geom.x_surf[m])
        ap = psnr(np.clip(view.buffers["albedo"] * s, 0, 1), gt_alb, m)
        nd = normal_angle(view.buffers["normal"], gt_geom.normal, m)
        tv = total_variation(view.buffers["normal"], m)
        ss = ssim(pred * m[..., None], img * m[..., None])
        for k, val in (("recon_psnr", rp), ("albedo_psnr", ap), ("normal_deg", nd), ("normal_tv", tv), ("ssim", ss)):
            report.add(v.name, k, val)
        views.append(ViewEval(v.name, v.split, rp, ap, nd, tv, ss))
    for c, val in zip("rgb", s):
        report.add("scale", f"albedo_scale_{c}", val)
    return report, views


def relight_psnr(model, scene_dir, distill_dir, brdf_model, olats, split="test", scales=None):
    """Mean PSNR of OLAT relights (scale-corrected albedo) against ground-truth relights."""
    ds = load_scene(Path(scene_dir) / "manifest.json")
    spec = _fixture_spec(scene_dir)
    s = albedo_scales(model, scene_dir, distill_dir) if scales is None else scales
    edited = edit_material(model, albedo_scale=s)
    h, w = spec.probe_resolution
    vals = []
    for v in ds.split(split):
        geom = load_buffers(distill_dir, v.name)
        gt_geom = load_gt_geometry(scene_dir, v.name)
        cam = ds.camera(v)
        m = geom.hit_mask()
        for r, c in olats:
            probe = make_olat(h, w, r, c)
            pred = render_view(edited, geom, cam, probe).display()
            gt = render_gt(spec, gt_geom, cam, probe, brdf_model).display()
            vals.append(psnr(pred, gt, m))
    return float(np.mean(vals)), vals


def _pick_view(ds, name):
    if name is None:
        return ds.views[0]
    for v in ds.views:
        if v.name == name:
            return v
    raise ValueError(f"no view named {name!r} (have {', '.join(v.name for v in ds.views)})")


def write_view_outputs(out_dir, name, view, probe):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    png_write(out / f"{name}.png", to_uint8(composite(view, probe)))
    (out / f"{name}.pfm").write_bytes(save_pfm(view.hdr))
    for key in ("normal", "albedo", "ao"):
        buf = view.buffers[key]
        vis = 0.5 * (buf + 1.0) if key == "normal" else buf
        png_write(out / f"{name}_{key}.png", to_uint8(np.clip(vis, 0, 1)))
        (out / f"{name}_{key}.pfm").write_bytes(save_pfm(buf))
    z = view.buffers["z"]
    (out / f"{name}_z.pfm").write_bytes(save_pfm(np.pad(z, ((0, 0), (0, 0), (0, max(0, 3 - z.shape[2]))))[..., :3]))


def relight(model, scene_dir, distill_dir, out_dir, view_name=None, probes=(), olats=(), log=None):
    """Composited renders of one view under named probes and OLAT pixels; returns the PNG paths."""
    ds = load_scene(Path(scene_dir) / "manifest.json")
    v = _pick_view(ds, view_name)
    geom = load_buffers(distill_dir, v.name)
    cam = ds.camera(v)
    written = []
    h, w = model.config.probe_height, model.config.probe_width
    jobs = [resolve_probe(p, h, w) for p in probes]
    jobs += [(f"olat_{r:02d}_{c:02d}", make_olat(h, w, r, c)) for r, c in olats]
    if not jobs:
        jobs = [("estimated", model.probe())]
    for name, probe in jobs:
        view = render_view(model, geom, cam, probe)
        write_view_outputs(out_dir, f"{v.name}_{name}", view, probe)
        written.append(Path(out_dir) / f"{v.name}_{name}.png")
        if log is not None:
            log(f"relit {v.name} under {name}")
    return written


def edit(model, scene_dir, distill_dir, out_dir, albedo=None, code=None, view_name=None):
    ds = load_scene(Path(scene_dir) / "manifest.json")
    v = _pick_view(ds, view_name)
    geom = load_buffers(distill_dir, v.name)
    if albedo == "turbo":
        albedo = turbo
    edited = edit_material(model, albedo, code)
    probe = model.probe()
    view = render_view(edited, geom, ds.camera(v), probe)
    write_view_outputs(out_dir, f"{v.name}_edit", view, probe)
    return Path(out_dir) / f"{v.name}_edit.png"


# -- consistency ------------------------------------------------------------------------------


def pairwise_albedo_psnr(albedos, mask):
    """Scale-corrected albedo PSNR between every pair of runs (second corrected toward the first)."""
    rows = []
    for (i, a), (j, b) in itertools.combinations(enumerate(albedos), 2):
        corrected, _ = albedo_scale_correct(b, a, mask)
        rows.append({"run_a": i, "run_b": j, "psnr": psnr(np.clip(corrected, 0, 1), a, mask)})
    return rows


def consistency_experiment(spec: FixtureSpec, probes, brdf_model, config: FactorConfig, work_dir,
                           shared_distill=None, init_params=None, log=None):
    """Regenerate the fixture under each probe, train once per probe, compare albedo pairwise.

    The geometry stage does not depend on the images, so one distillation
    (and optionally one pretrained geometry state) is shared by every run.
    """
    work = Path(work_dir)
    albedos = []
    mask = None
    distill_dir = shared_distill
    for i, rad in enumerate(probes):
        sp = FixtureSpec.from_dict({**spec.to_dict(), "probe": np.asarray(rad).tolist()})
        scene = work / f"probe_{i}" / "scene"
        synth(scene, sp, brdf_model)
        if distill_dir is None:
            distill_dir = distill(scene, work / "distill", sp.n_samples, sp.vis_samples)
        model, _, _ = train_model(scene, distill_dir, brdf_model, config, init_params=init_params)
        ds = load_scene(scene / "manifest.json")
        parts = []
        masks = []
        for v in ds.split("train"):
            geom = load_buffers(distill_dir, v.name)
            m = geom.hit_mask()
            buf = np.zeros(m.shape + (3,))
            buf[m] = model.predict(geom.x_surf[m].astype(np.float64)).albedo
            parts.append(buf)
            masks.append(m)
        albedos.append(np.concatenate(parts, axis=0))
        mask = np.concatenate(masks, axis=0)
        if log is not None:
            log(f"consistency run {i} done")
    return pairwise_albedo_psnr(albedos, mask)


def bright_ambient_probe(h, w, ambient, pixel, value):
    rad = np.broadcast_to(np.asarray(ambient, dtype=np.float64), (h, w, 3)).copy()
    rad[pixel] = value
    return LightProbe(rad)


def sky_probe(h, w):
    """Smooth low-frequency probe: bluish zenith fading to a warm horizon, dim ground."""
    z = pixel_directions(h, w)[..., 2:3]
    up = np.clip(z, 0.0, 1.0)
    rad = 0.4 + 1.6 * up * np.array([0.6, 0.8, 1.0]) + 0.8 * (1 - up) * np.array([1.0, 0.7, 0.4])
    return LightProbe(np.where(z > 0, rad, 0.15))


def named_probe(name, h, w):
    """``studio`` (bright pixel over ambient), ``sky`` or ``uniform``."""
    if name == "studio":
        spec = FixtureSpec(probe_resolution=(h, w))
        pix = (min(spec.bright_pixel[0], h - 1), min(spec.bright_pixel[1], w - 1))
        return bright_ambient_probe(h, w, spec.ambient, pix, spec.bright_value)
    if name == "sky":
        return sky_probe(h, w)
    if name == "uniform":
        return LightProbe.constant(h, w, 1.0)
    raise ValueError(f"unknown probe name {name!r} (expected studio, sky or uniform)")


PROBE_NAMES = ("studio", "sky", "uniform")


def resolve_probe(ref, h, w):
    """A probe from a ``.hdr`` path or a name in :data:`PROBE_NAMES`."""
    if ref in PROBE_NAMES:
        return ref, named_probe(ref, h, w)
    path = _require(ref, "probe file", "synth")
    probe = load_probe(path)
    if (probe.height, probe.width) != (h, w):
        raise ValueError(f"probe {path} is {probe.height}x{probe.width}, expected {h}x{w}")
    return path.stem, probe
