import csv

import numpy as np
import pytest

from invrender.brdf import BrdfLatentModel, decoder_config
from invrender.errors import ContractViolation
from invrender.factor import (
    FactorConfig,
    FactorModel,
    LossWeights,
    TrainBatch,
    TrainingAborted,
    TrainingData,
    grad_of,
    joint_optimize,
    load_model,
    loss_albedo_smooth,
    loss_light,
    loss_normal,
    loss_recon,
    loss_terms,
    loss_visibility,
    loss_z_smooth,
    pretrain_geometry,
    save_model,
    total_loss,
    write_log_csv,
)
from invrender.fields import SphereField, distill_geometry_buffers
from invrender.lighting import linear_to_srgb, pixel_directions, solid_angles
from invrender.nnet import PosEncConfig, init_mlp, posenc
from invrender.render import view_directions
from invrender.scene_io import Camera

PH, PW = 2, 4
K = PH * PW


def tiny_brdf(seed=0):
    rng = np.random.default_rng(seed)
    enc = PosEncConfig(1, True)
    cfg = decoder_config(6, 2, enc)
    return BrdfLatentModel(cfg, enc, init_mlp(cfg, rng, dtype=np.float64), rng.standard_normal((2, 3)), ["a", "b"])


def tiny_config(**kw):
    base = dict(xyz_levels=2, dir_levels=1, width=8, depth=2, skip_layer=1, probe_height=PH, probe_width=PW,
                dtype="float64", batch_size=16, seed=3)
    base.update(kw)
    return FactorConfig(**base)


def tiny_model(seed=3, **kw):
    m = FactorModel(tiny_config(seed=seed, **kw), tiny_brdf())
    rng = np.random.default_rng(seed + 100)
    m.params["probe"] = rng.random((PH, PW, 3)) + 0.2
    for k, v in m.params.items():
        if k.endswith("/b0") or k.endswith("/b1"):
            m.params[k] = rng.standard_normal(v.shape) * 0.1
    return m


def tiny_batch(seed=0, b=6, smooth_lights=None, eps_std=0.05):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.8, 0.8, (b, 3))
    normal_target = rng.standard_normal((b, 3))
    normal_target /= np.linalg.norm(normal_target, axis=1, keepdims=True)
    wo = rng.standard_normal((b, 3))
    wo /= np.linalg.norm(wo, axis=1, keepdims=True)
    return TrainBatch(x, rng.standard_normal((b, 3)) * eps_std, rng.random((b, 3)), wo, normal_target, rng.random((b, K)),
                      pixel_directions(PH, PW).reshape(-1, 3), solid_angles(PH, PW).reshape(-1), smooth_lights)


def const_head(model, group, value):
    d = model.config.depth
    model.params[f"{group}/w{d}"][:] = 0
    model.params[f"{group}/b{d}"][:] = value


# -- model invariants ------------------------------------------------------------------------------


def test_albedo_bounds_exact():
    m = tiny_model()
    x = np.random.default_rng(0).uniform(-1, 1, (50, 3))
    for scale in (1.0, 1e4, -1e4):
        m.params["albedo/b2"][:] = scale
        a = m.albedo(m.params, m._enc(x))
        assert np.all(a >= 0.03) and np.all(a <= 0.8)
    m.params["albedo/w2"][:] = 0
    m.params["albedo/b2"][:] = 1e4
    assert np.all(m.albedo(m.params, m._enc(x)) == 0.8)
    m.params["albedo/b2"][:] = -1e4
    assert np.all(m.albedo(m.params, m._enc(x)) == 0.03)


def test_normal_unit_and_visibility_range():
    m = tiny_model()
    x = np.random.default_rng(1).uniform(-1, 1, (40, 3))
    f = m.predict(x)
    assert np.allclose(np.linalg.norm(f.normal, axis=1), 1, atol=1e-6)
    assert np.all((f.visibility > 0) & (f.visibility < 1))
    assert f.visibility.shape == (40, K) and f.brdf_param.shape == (40, 3)


def test_microfacet_head():
    m = FactorModel(tiny_config(microfacet_brdf=True), None)
    r = m.predict(np.zeros((3, 3))).brdf_param
    assert r.shape == (3, 1) and np.all((r >= 1e-3) & (r <= 1))
    with pytest.raises(ContractViolation):
        FactorModel(tiny_config(), None)


def test_config_dict_round_trip():
    cfg = tiny_config(no_smoothness=True)
    assert cfg.weights.normal_smooth == 0 and cfg.weights.brdf_smooth == 0 and cfg.weights.normal_fit == 0.1
    assert FactorConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ContractViolation):
        FactorConfig.from_dict({"bogus": 1})
    with pytest.raises(ContractViolation):
        LossWeights(normal_fit=-1)


# -- closed forms -----------------------------------------------------------------------------------


def test_normal_loss_closed_form():
    m = tiny_model()
    c = np.array([0.0, 0.6, 0.8])
    const_head(m, "normal", c)
    b = tiny_batch()
    n_hat = np.array([1.0, 0.0, 0.0])
    b.normal_target[:] = n_hat
    assert float(loss_normal(m, b)) == pytest.approx(0.1 / 3 * np.sum((c - n_hat) ** 2), abs=1e-12)
    b.normal_target[:] = c
    assert float(loss_normal(m, b)) == pytest.approx(0.0, abs=1e-14)


def test_visibility_loss_closed_form():
    m = tiny_model()
    p, t = 0.7, 0.2
    const_head(m, "vis", np.log(p / (1 - p)))
    b = tiny_batch()
    b.vis_target[:] = t
    assert float(loss_visibility(m, b)) == pytest.approx(K * 0.1 * (p - t) ** 2, rel=1e-10)
    b.vis_target[:] = p
    assert float(loss_visibility(m, b)) == pytest.approx(0.0, abs=1e-14)


class StepAlbedo(FactorModel):
    """Albedo and code depend only on the raw x coordinate."""

    delta = 0.1

    def albedo(self, p, enc):
        x0 = enc[:, :1]
        return np.tile(0.4 + self.delta * x0, (1, 3))

    def brdf_param(self, p, enc):
        return np.tile(2 * self.delta * enc[:, :1], (1, 3))


def test_albedo_and_z_smoothness_closed_form():
    m = StepAlbedo(tiny_config(), tiny_brdf())
    b = tiny_batch()
    b.x[:, 0] = 0.0
    b.eps[:, 0] = 1.0
    assert float(loss_albedo_smooth(m, b)) == pytest.approx(0.05 * 0.1, rel=1e-12)
    assert float(loss_z_smooth(m, b)) == pytest.approx(0.01 * 0.2, rel=1e-12)
    b.eps[:, 0] = 0.0
    assert float(loss_albedo_smooth(m, b)) == 0.0


class DirectionOnlyVis(FactorModel):
    def visibility(self, p, enc, dirs):
        b = np.shape(enc)[0]
        return np.broadcast_to(1 / (1 + np.exp(-3 * np.asarray(dirs)[:, 2])), (b, len(dirs)))


@pytest.mark.parametrize("sub", [None, 3])
def test_visibility_smoothness_never_mixes_directions(sub):
    m = DirectionOnlyVis(tiny_config(), tiny_brdf())
    b = tiny_batch(smooth_lights=None if sub is None else np.array([0, 3, 5]))
    b.vis_target[:] = m.visibility(None, np.zeros((len(b.x), 1)), b.light_dirs)
    assert float(loss_visibility(m, b)) == 0.0


def test_loss_recon_examples(rng):
    t = rng.random((5, 3))
    assert float(loss_recon(t, t, linear=True)) == 0.0
    assert float(loss_recon(t + 0.1, t, linear=True)) == pytest.approx(0.01)
    r = rng.random((5, 3))
    assert float(loss_recon(r, t)) == pytest.approx(np.mean((linear_to_srgb(r) - t) ** 2))


def test_light_loss_constant_probe_zero():
    m = tiny_model()
    m.params["probe"][:] = 0.3
    assert float(loss_light(m)) == 0.0


# -- duplicate-evaluation oracles -------------------------------------------------------------------


def straight_line(m, b):
    """Every loss term recomputed directly from the head outputs."""
    w = m.config.weights
    p = m.params
    e, ee = posenc(b.x, m.xyz_enc), posenc(b.x + b.eps, m.xyz_enc)
    n, n2 = m.normal(p, e), m.normal(p, ee)
    v, v2 = m.visibility(p, e, b.light_dirs), m.visibility(p, ee, b.light_dirs)
    a, a2 = m.albedo(p, e), m.albedo(p, ee)
    z, z2 = m.brdf_param(p, e), m.brdf_param(p, ee)
    out = {}
    out["normal"] = np.mean([w.normal_fit / 3 * np.sum((n[i] - b.normal_target[i]) ** 2)
                             + w.normal_smooth / 3 * np.sum(np.abs(n[i] - n2[i])) for i in range(len(n))])
    out["vis"] = np.mean([sum(w.vis_fit * (v[i, k] - b.vis_target[i, k]) ** 2 + w.vis_smooth * abs(v[i, k] - v2[i, k])
                              for k in range(v.shape[1])) for i in range(len(v))])
    out["albedo"] = w.albedo_smooth * np.mean(np.abs(a - a2).sum(1)) / 3
    out["brdf"] = w.brdf_smooth * np.mean(np.abs(z - z2).sum(1)) / 3
    rad = p["probe"].reshape(-1, 3)
    from invrender.render import specular

    spec = specular(m.brdf_model, z, n, b.light_dirs, b.wo)
    rgb = np.zeros((len(n), 3))
    for i in range(len(n)):
        for k in range(len(b.light_dirs)):
            cos = max(b.light_dirs[k] @ n[i], 0.0)
            rgb[i] += (a[i] / np.pi + spec[i, k]) * rad[k] * v[i, k] * cos * b.solid[k]
    out["recon"] = np.mean((linear_to_srgb(rgb) - b.target) ** 2)
    pr = p["probe"]
    out["light"] = m.config.weights.light_smooth * (np.sum((pr[:, 1:] - pr[:, :-1]) ** 2)
                                                    + np.sum((pr[1:] - pr[:-1]) ** 2))
    return out


def test_duplicate_evaluation_oracle():
    m = tiny_model()
    b = tiny_batch()
    got = {k: float(v) for k, v in loss_terms(m, b).items()}
    want = straight_line(m, b)
    assert set(got) == set(want)
    for k in want:
        assert got[k] == pytest.approx(want[k], rel=1e-10, abs=1e-15), k
    assert float(loss_normal(m, b)) == pytest.approx(want["normal"], rel=1e-12)
    assert float(total_loss(m, b)) == pytest.approx(sum(want.values()), abs=1e-10)


def test_smooth_light_subsample_unbiased():
    m = tiny_model()
    b = tiny_batch()
    full = float(loss_visibility(m, b))
    vals = []
    rng = np.random.default_rng(0)
    for _ in range(400):
        sub = np.sort(rng.choice(K, 3, replace=False))
        b.smooth_lights = sub
        vals.append(float(loss_visibility(m, b)))
    assert np.mean(vals) == pytest.approx(full, rel=0.03)


def test_zero_weights_reduce_total():
    m = tiny_model()
    m.config.weights = LossWeights(normal_smooth=0, vis_smooth=0, albedo_smooth=0, brdf_smooth=0)
    b = tiny_batch()
    t = loss_terms(m, b)
    assert float(t["albedo"]) == 0 and float(t["brdf"]) == 0
    want = straight_line(m, b)
    assert float(total_loss(m, b)) == pytest.approx(want["recon"] + want["normal"] + want["vis"] + want["light"],
                                                    abs=1e-12)


# -- gradients --------------------------------------------------------------------------------------


def _fd_check(fn, m, b, names, rng, n_coords=6, h=1e-6):
    _, grads, _ = grad_of(fn, m, b, names)
    for k in names:
        flat = m.params[k].reshape(-1)
        g = grads[k].reshape(-1)
        picks = rng.choice(flat.size, min(n_coords, flat.size), replace=False)
        fd = np.zeros(len(picks))
        for j, i in enumerate(picks):
            old = flat[i]
            flat[i] = old + h
            up = _scalar(fn(m, b, m.params))
            flat[i] = old - h
            dn = _scalar(fn(m, b, m.params))
            flat[i] = old
            fd[j] = (up - dn) / (2 * h)
        err = np.linalg.norm(g[picks] - fd) / max(np.linalg.norm(fd), np.linalg.norm(g[picks]), 1e-9)
        assert err < 1e-3 or np.linalg.norm(fd) < 1e-9, (fn.__name__, k, err)


def _scalar(out):
    if isinstance(out, dict):
        return sum(float(v) for v in out.values())
    return float(out)


def _light(m, b, p):
    return loss_light(m, p)


def _recon(m, b, p):
    return loss_terms(m, b, p)["recon"]


@pytest.mark.parametrize("fn", [loss_normal, loss_visibility, loss_albedo_smooth, loss_z_smooth, _light, _recon,
                                total_loss, loss_terms])
def test_gradients_match_finite_differences(fn):
    m = tiny_model(seed=11)
    b = tiny_batch(seed=5)
    names = list(m.params)
    _fd_check(fn, m, b, names, np.random.default_rng(0))


def test_microfacet_gradients():
    m = FactorModel(tiny_config(microfacet_brdf=True, seed=4), None)
    m.params["probe"] = np.random.default_rng(0).random((PH, PW, 3)) + 0.1
    _fd_check(total_loss, m, tiny_batch(seed=2), list(m.params), np.random.default_rng(1))


def _manual_reduced(drop):
    def fn(model, batch, p):
        from invrender.factor import _Eval, _sq_rows
        from invrender.nnet import autodiff as ad

        full = FactorModel(tiny_config(seed=3), model.brdf_model, model.params)
        t = loss_terms(full, batch, p)
        w = full.config.weights
        ev = _Eval(full, p, batch)
        if drop == "normal_smooth":
            t["normal"] = ad.mean(ad.mul(_sq_rows(ev.get("normal"), batch.normal_target), w.normal_fit / 3))
        elif drop == "vis_smooth":
            t["vis"] = ad.mean(ad.mul(_sq_rows(ev.get("vis"), batch.vis_target), w.vis_fit))
        else:
            t.pop({"albedo_smooth": "albedo", "brdf_smooth": "brdf", "light_smooth": "light"}[drop])
        return t

    return fn


@pytest.mark.parametrize("drop", ["normal_smooth", "vis_smooth", "albedo_smooth", "brdf_smooth", "light_smooth"])
def test_zeroed_weight_removes_gradient_exactly(drop):
    m = tiny_model()
    b = tiny_batch(seed=7)
    zeroed = FactorModel(tiny_config(weights=LossWeights(**{drop: 0.0})), m.brdf_model, m.params)
    names = list(m.params)
    _, g1, _ = grad_of(loss_terms, zeroed, b, names)
    _, g2, _ = grad_of(_manual_reduced(drop), m, b, names)
    for k in names:
        assert np.allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15), k


# -- training ----------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sphere_data():
    fld = SphereField(radius=0.6, softness=0.01)
    dirs = pixel_directions(PH, PW).reshape(-1, 3)
    views = []
    for eye in ((0, -2.5, 0.5), (2.5, 0, 0.5)):
        cam = Camera.look_at(eye, (0, 0, 0), 16, 16, 0.8)
        geom = distill_geometry_buffers(fld, cam, dirs, n_samples=96, vis_samples=32)
        img = np.where(geom.hit_mask()[..., None], 0.5, 0.0) * np.ones(3)
        views.append((geom, img, view_directions(cam)))
    return TrainingData.from_views(views, dirs, solid_angles(PH, PW).reshape(-1))


def test_pretrain_fits_sphere_and_isolates(sphere_data):
    m = FactorModel(tiny_config(width=32, xyz_levels=3, batch_size=64, steps_per_epoch=10), tiny_brdf())
    before = {k: v.copy() for k, v in m.params.items()}
    rows = pretrain_geometry(m, sphere_data, epochs=60)
    assert rows[-1]["total"] < rows[0]["total"]
    for k in m.group_names("albedo", "brdf", "probe"):
        assert np.array_equal(m.params[k], before[k])
    f = m.predict(sphere_data.x.astype(np.float64))
    cos = np.clip(np.sum(f.normal * sphere_data.normal_target, 1), -1, 1)
    assert np.degrees(np.arccos(cos)).mean() < 3.0
    assert np.mean((f.visibility - sphere_data.vis_target) ** 2) < 1e-2


def test_joint_freezes_decoder_and_clamps_probe(sphere_data, tmp_path):
    brdf = tiny_brdf()
    dec = {k: v.copy() for k, v in brdf.params.items()}
    m = FactorModel(tiny_config(batch_size=32, steps_per_epoch=4, lr_probe=0.05, probe_init=0.01), brdf)
    rows = joint_optimize(m, sphere_data, epochs=8)
    assert rows[-1]["total"] <= rows[0]["total"]
    assert np.all(m.params["probe"] >= 0)
    assert all(np.array_equal(brdf.params[k], dec[k]) for k in dec)
    write_log_csv(tmp_path / "log.csv", [], rows)
    got = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert len(got) == 8 and set(got[0]) >= {"epoch", "recon", "normal", "vis", "albedo", "brdf", "light"}


def test_use_nerf_shape_freezes_geometry(sphere_data):
    m = FactorModel(tiny_config(batch_size=32, steps_per_epoch=3, use_nerf_shape=True), tiny_brdf())
    before = {k: v.copy() for k, v in m.params.items()}
    joint_optimize(m, sphere_data, epochs=2)
    for k in m.group_names("normal", "vis"):
        assert np.array_equal(m.params[k], before[k])
    assert not np.array_equal(m.params["albedo/w0"], before["albedo/w0"])


def test_non_finite_loss_aborts_with_last_good(sphere_data):
    data = TrainingData(**{**sphere_data.__dict__, "target": sphere_data.target.copy()})
    m = FactorModel(tiny_config(batch_size=len(data), steps_per_epoch=1), tiny_brdf())
    joint_optimize(m, data, epochs=1)
    good = {k: v.copy() for k, v in m.params.items()}
    data.target[:] = np.nan
    with pytest.raises(TrainingAborted) as err:
        joint_optimize(m, data, epochs=1)
    assert all(np.array_equal(err.value.model.params[k], good[k]) for k in good)


def test_save_load_round_trip(tmp_path):
    m = FactorModel(tiny_config(dtype="float32"), tiny_brdf())
    save_model(m, tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt", m.brdf_model)
    assert back.config == m.config
    assert all(np.array_equal(back.params[k], m.params[k]) for k in m.params)
