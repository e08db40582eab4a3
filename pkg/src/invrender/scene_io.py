"""Posed-image scenes: cameras, manifests, PNG I/O and the synthetic fixture writer.

Manifests follow the common transforms-file layout: ``camera_angle_x`` plus a
list of frames with ``file_path`` and a 4x4 camera-to-world
``transform_matrix``.  Cameras are right-handed and look down their local -z
axis with +y up.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ContractViolation, FormatError, ValidationError
from .fields import BoxField, GeometryBuffers, SphereField, SumField, distill_geometry_buffers, save_field
from .lighting import LightProbe, linear_to_srgb, load_hdr, pixel_directions, save_hdr, save_pfm
from .render import explicit_factors, render_view

CAMERA_CONVENTION = "right-handed; camera looks down -z with +y up; transform_matrix is camera-to-world"
ORTHO_TOL = 1e-5
SPLITS = ("train", "val", "test")
# surface points this far above the ground top belong to the object
OBJECT_CLEARANCE = 0.05


@dataclass
class Camera:
    c2w: np.ndarray  # (3, 4) rotation | translation
    width: int
    height: int
    focal: float  # pixels

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape == (4, 4):
            self.c2w = self.c2w[:3]
        if self.c2w.shape != (3, 4):
            raise ValidationError("camera transform must be 3x4 or 4x4")

    @classmethod
    def from_fov(cls, c2w, width, height, camera_angle_x):
        return cls(c2w, width, height, 0.5 * width / np.tan(0.5 * camera_angle_x))

    @classmethod
    def look_at(cls, eye, target, width, height, camera_angle_x, up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, dtype=np.float64)
        back = eye - np.asarray(target, dtype=np.float64)
        back /= np.linalg.norm(back)
        right = np.cross(up, back)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross((0.0, 1.0, 0.0), back)
        right /= np.linalg.norm(right)
        cam_up = np.cross(back, right)
        c2w = np.column_stack([right, cam_up, back, eye])
        return cls.from_fov(c2w, width, height, camera_angle_x)

    @property
    def rotation(self):
        return self.c2w[:, :3]

    @property
    def origin(self):
        return self.c2w[:, 3]

    @property
    def camera_angle_x(self):
        return 2.0 * np.arctan(0.5 * self.width / self.focal)

    def orthonormal_error(self):
        r = self.rotation
        return float(np.abs(r.T @ r - np.eye(3)).max())

    def validate(self, name="camera"):
        err = self.orthonormal_error()
        if err > ORTHO_TOL or np.linalg.det(self.rotation) < 0:
            raise ValidationError(f"{name}: rotation block not orthonormal (error {err:.3g})")

    def rays(self):
        """Per-pixel origins and unit directions, both ``(H, W, 3)``, through pixel centers."""
        j, i = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5, indexing="ij")
        d = np.stack([(i - 0.5 * self.width) / self.focal, -(j - 0.5 * self.height) / self.focal,
                      -np.ones_like(i)], axis=-1)
        d = d @ self.rotation.T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return np.broadcast_to(self.origin, d.shape).copy(), d

    def transform_matrix(self):
        return np.vstack([self.c2w, [0.0, 0.0, 0.0, 1.0]])

    def normalized(self, center, scale):
        c2w = self.c2w.copy()
        c2w[:, 3] = (c2w[:, 3] - center) * scale
        return Camera(c2w, self.width, self.height, self.focal)


@dataclass
class View:
    file_path: str
    camera: Camera
    split: str = "train"

    @property
    def name(self):
        return Path(self.file_path).stem


@dataclass
class SceneDataset:
    views: list
    camera_angle_x: float
    width: int
    height: int
    bounds: np.ndarray  # (2, 3) world-space box enclosing the density
    probe_resolution: tuple = (16, 32)
    root: Path | None = None
    extra: dict = field(default_factory=dict)
    missing: list = field(default_factory=list)

    def split(self, name):
        return [v for v in self.views if v.split == name]

    def normalization(self):
        """Center and scale that map the scene bounds into ``[-1, 1]^3``."""
        lo, hi = np.asarray(self.bounds[0], float), np.asarray(self.bounds[1], float)
        return 0.5 * (lo + hi), 1.0 / float(np.max(0.5 * (hi - lo)))

    def camera(self, view, normalized=True):
        if not normalized:
            return view.camera
        c, s = self.normalization()
        return view.camera.normalized(c, s)

    def path(self, rel):
        return (self.root or Path(".")) / rel

    def image(self, view):
        """``(H, W, 4)`` float RGBA in [0, 1] (sRGB-encoded colour as stored)."""
        return png_read(self.path(view.file_path)).astype(np.float64) / 255.0

    def field(self):
        from .fields import ScaledField, load_field

        rel = self.extra.get("density_field")
        if rel is None:
            raise ContractViolation("manifest names no density_field")
        base = load_field(self.path(rel))
        c, s = self.normalization()
        if np.allclose(c, 0.0) and s == 1.0:
            return base
        return ScaledField(base, c, s)


def _frame_dict(view):
    return {"file_path": view.file_path, "split": view.split,
            "transform_matrix": [[float(v) for v in row] for row in view.camera.transform_matrix()]}


def manifest_dict(ds: SceneDataset):
    d = {"camera_convention": CAMERA_CONVENTION, "camera_angle_x": float(ds.camera_angle_x),
         "width": int(ds.width), "height": int(ds.height),
         "scene_bounds": [[float(v) for v in row] for row in np.asarray(ds.bounds)],
         "probe_resolution": [int(v) for v in ds.probe_resolution]}
    d.update(ds.extra)
    d["frames"] = [_frame_dict(v) for v in ds.views]
    return d


def dumps_manifest(ds: SceneDataset) -> str:
    return json.dumps(manifest_dict(ds), indent=2) + "\n"


def write_manifest(ds: SceneDataset, path):
    Path(path).write_text(dumps_manifest(ds))


def parse_manifest(text, root=None) -> SceneDataset:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest is not valid JSON: {e.msg}", e.pos) from None
    if not isinstance(d, dict):
        raise ValidationError("manifest must be a JSON object")
    frames = d.get("frames")
    if not frames:
        raise ValidationError("manifest has no frames")
    if "camera_angle_x" not in d:
        raise ValidationError("manifest lacks camera_angle_x")
    width, height = int(d.get("width", 0)), int(d.get("height", 0))
    root = Path(root) if root is not None else None
    if width <= 0 or height <= 0:
        # fall back to the first readable image
        first = root / frames[0]["file_path"] if root else None
        if first is None or not first.exists():
            raise ValidationError("manifest lacks image dimensions and the first image is missing")
        height, width = png_read(first).shape[:2]
    angle = float(d["camera_angle_x"])
    views = []
    for i, fr in enumerate(frames):
        name = fr.get("file_path", f"frame {i}")
        try:
            m = np.asarray(fr["transform_matrix"], dtype=np.float64)
        except (KeyError, ValueError, TypeError):
            raise ValidationError(f"frame {name}: missing or malformed transform_matrix") from None
        if m.shape != (4, 4) or not np.all(np.isfinite(m)):
            raise ValidationError(f"frame {name}: transform_matrix must be a finite 4x4 matrix")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=ORTHO_TOL):
            raise ValidationError(f"frame {name}: bottom row must be 0 0 0 1")
        split = fr.get("split", "train")
        if split not in SPLITS:
            raise ValidationError(f"frame {name}: unknown split {split!r}")
        cam = Camera.from_fov(m, width, height, angle)
        cam.validate(f"frame {name}")
        views.append(View(name, cam, split))
    bounds = np.asarray(d.get("scene_bounds", [[-1, -1, -1], [1, 1, 1]]), dtype=np.float64)
    if bounds.shape != (2, 3) or np.any(bounds[1] <= bounds[0]):
        raise ValidationError("scene_bounds must be [[xmin, ymin, zmin], [xmax, ymax, zmax]]")
    known = {"camera_convention", "camera_angle_x", "width", "height", "scene_bounds", "probe_resolution", "frames"}
    extra = {k: v for k, v in d.items() if k not in known}
    ds = SceneDataset(views, angle, width, height, bounds, tuple(d.get("probe_resolution", (16, 32))), root, extra)
    if root is not None:
        ds.missing = [v.file_path for v in views if not (root / v.file_path).exists()]
    return ds


def load_scene(path) -> SceneDataset:
    """Parse a manifest file; frames whose image is absent are listed in ``missing``."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")
    return parse_manifest(path.read_text(), root=path.parent)


# -- PNG ---------------------------------------------------------------------------------


def png_encode(rgba) -> bytes:
    arr = np.asarray(rgba)
    if arr.dtype != np.uint8:
        raise ContractViolation("png_write expects uint8 pixels")
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    if arr.shape[-1] == 3:
        arr = np.concatenate([arr, np.full(arr.shape[:2] + (1,), 255, np.uint8)], axis=-1)
    buf = io.BytesIO()
    Image.fromarray(arr, "RGBA").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def png_decode(data) -> np.ndarray:
    data = bytes(data)
    if not data.startswith(b"\x89PNG\r\n\x1a\n"):
        raise FormatError("bad PNG signature", 0)
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise FormatError(f"corrupt PNG: {e}") from None
    if img.mode in ("I;16", "I"):
        img = Image.fromarray((np.asarray(img, dtype=np.uint32) >> 8).astype(np.uint8))
    return np.asarray(img.convert("RGBA"))


def png_write(path, rgba):
    Path(path).write_bytes(png_encode(rgba))


def png_read(path) -> np.ndarray:
    """``(H, W, 4)`` uint8 RGBA; grey and RGB inputs are promoted, colours untouched."""
    return png_decode(Path(path).read_bytes())


def to_uint8(img):
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# -- fixture -----------------------------------------------------------------------------


@dataclass
class FixtureSpec:
    """Sphere resting on a ground slab under a bright-pixel-plus-ambient probe."""

    seed: int = 0
    n_train: int = 8
    n_test: int = 4
    width: int = 64
    height: int = 64
    camera_angle_x: float = 0.75
    camera_distance: float = 3.2
    camera_target: tuple = (0.0, 0.0, 0.2)
    elevation_range: tuple = (20.0, 60.0)  # degrees
    sphere_center: tuple = (0.0, 0.0, 0.45)
    sphere_radius: float = 0.45
    ground_top: float = 0.0
    ground_bottom: float = -0.2
    ground_half_size: float = 0.95
    density: float = 100.0
    softness: float = 0.01
    albedo_object: tuple = (0.7, 0.45, 0.25)
    albedo_ground: tuple = (0.3, 0.5, 0.65)
    material: str = "ggx_0.3"  # latent code name, or "roughness:<value>" for the GGX variant
    probe_resolution: tuple = (8, 16)
    ambient: tuple = (0.4, 0.4, 0.4)
    bright_pixel: tuple = (1, 3)
    # kept moderate: the probe gradient penalty on a much hotter pixel outweighs
    # the reconstruction term and the fit settles on a blurred light
    bright_value: tuple = (6.0, 5.6, 5.2)
    # optional explicit probe radiance (H, W, 3) overriding ambient/bright
    probe: list | None = None
    n_samples: int = 192
    vis_samples: int = 64

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("camera_target", "elevation_range", "sphere_center", "albedo_object", "albedo_ground",
                  "probe_resolution", "ambient", "bright_pixel", "bright_value"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @property
    def roughness(self):
        if self.material.startswith("roughness:"):
            return float(self.material.split(":", 1)[1])
        return None


def fixture_field(spec: FixtureSpec):
    h = spec.ground_half_size
    sphere = SphereField(spec.sphere_center, spec.sphere_radius, spec.density, spec.softness)
    zc = 0.5 * (spec.ground_top + spec.ground_bottom)
    hz = 0.5 * (spec.ground_top - spec.ground_bottom)
    ground = BoxField((0.0, 0.0, zc), (h, h, hz), spec.density, spec.softness)
    return SumField([sphere, ground])


def fixture_probe(spec: FixtureSpec):
    """Ground-truth probe, quantized through RGBE so the saved ``probe.hdr`` is exact."""
    h, w = spec.probe_resolution
    if spec.probe is not None:
        rad = np.asarray(spec.probe, dtype=np.float64)
        if rad.shape != (h, w, 3):
            raise ContractViolation("fixture probe must match probe_resolution")
    else:
        rad = np.broadcast_to(np.asarray(spec.ambient, dtype=np.float64), (h, w, 3)).copy()
        r, c = spec.bright_pixel
        rad[r, c] = spec.bright_value
    return LightProbe(load_hdr(save_hdr(rad)))


def fixture_albedo(spec: FixtureSpec, x):
    """Two-tone albedo: one colour on the object, another on the ground."""
    x = np.asarray(x, dtype=np.float64)
    on_object = x[..., 2] > spec.ground_top + OBJECT_CLEARANCE
    return np.where(on_object[..., None], np.asarray(spec.albedo_object), np.asarray(spec.albedo_ground))


def fixture_cameras(spec: FixtureSpec):
    """Deterministic views: training views on a jittered ring, test views in between."""
    rng = np.random.default_rng(spec.seed)
    lo, hi = np.radians(spec.elevation_range)
    cams = []
    n = spec.n_train + spec.n_test
    for i in range(n):
        if i < spec.n_train:
            az = 2 * np.pi * (i + rng.uniform(-0.2, 0.2)) / spec.n_train
        else:
            j = i - spec.n_train
            az = 2 * np.pi * (j + 0.5) / max(spec.n_test, 1) + np.pi / spec.n_train
        el = rng.uniform(lo, hi)
        eye = np.asarray(spec.camera_target) + spec.camera_distance * np.array(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera.look_at(eye, spec.camera_target, spec.width, spec.height, spec.camera_angle_x))
    return cams


def gt_brdf_param(spec: FixtureSpec, brdf_model, shape):
    if spec.roughness is not None:
        return np.full(shape + (1,), spec.roughness)
    if brdf_model is None:
        raise ContractViolation(f"material {spec.material!r} needs a BRDF latent model")
    return np.broadcast_to(np.asarray(brdf_model.code(spec.material), dtype=np.float64), shape + (3,)).copy()


def render_gt(spec, geom, camera, probe, brdf_model):
    """Render ground-truth factors for one view under ``probe``."""
    mask = geom.hit_mask()
    albedo = np.zeros(mask.shape + (3,))
    albedo[mask] = fixture_albedo(spec, geom.x_surf[mask])
    bparam = gt_brdf_param(spec, brdf_model, mask.shape)
    model = None if spec.roughness is not None else brdf_model
    return render_view(explicit_factors(geom, albedo, bparam), geom, camera, probe, model)


def generate_fixture(spec: FixtureSpec, out_dir, brdf_model=None, log=None):
    """Write an inverse-crime scene directory; returns its manifest path.

    Layout: ``manifest.json``, ``images/``, ``gt/`` (factor buffers as PFM and
    full geometry buffers as ``.npz``), ``probe.hdr``, ``field.json``,
    ``fixture.json``.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(exist_ok=True)
    fld = fixture_field(spec)
    save_field(out / "field.json", fld)
    probe = fixture_probe(spec)
    (out / "probe.hdr").write_bytes(save_hdr(probe))
    dirs = pixel_directions(*spec.probe_resolution).reshape(-1, 3)
    views = []
    for i, cam in enumerate(fixture_cameras(spec)):
        split = "train" if i < spec.n_train else "test"
        name = f"r_{i:03d}"
        geom = distill_geometry_buffers(fld, cam, dirs, spec.n_samples, spec.vis_samples)
        view = render_gt(spec, geom, cam, probe, brdf_model)
        rgba = np.concatenate([view.display(), geom.alpha[..., None].astype(np.float64)], axis=-1)
        png_write(out / "images" / f"{name}.png", to_uint8(rgba))
        geom.save(out / "gt" / f"{name}_geom.npz")
        mask = geom.hit_mask()
        (out / "gt" / f"{name}_normal.pfm").write_bytes(save_pfm(view.buffers["normal"]))
        (out / "gt" / f"{name}_albedo.pfm").write_bytes(save_pfm(view.buffers["albedo"]))
        (out / "gt" / f"{name}_ao.pfm").write_bytes(save_pfm(view.buffers["ao"]))
        (out / "gt" / f"{name}_alpha.pfm").write_bytes(save_pfm(mask.astype(np.float32)))
        views.append(View(f"images/{name}.png", cam, split))
        if log is not None:
            log(f"fixture view {name} ({split}): {int(mask.sum())} hit pixels")
    lo, hi = fld.bounds
    ds = SceneDataset(views, spec.camera_angle_x, spec.width, spec.height, np.array([lo, hi], dtype=np.float64),
                      tuple(spec.probe_resolution), out,
                      {"density_field": "field.json", "probe": "probe.hdr", "fixture": "fixture.json"})
    (out / "fixture.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    write_manifest(ds, out / "manifest.json")
    return out / "manifest.json"


def load_fixture_spec(scene_dir):
    p = Path(scene_dir) / "fixture.json"
    if not p.exists():
        return None
    return FixtureSpec.from_dict(json.loads(p.read_text()))


def load_gt_geometry(scene_dir, view_name):
    return GeometryBuffers.load(Path(scene_dir) / "gt" / f"{view_name}_geom.npz")


def srgb_image(hdr):
    return np.asarray(linear_to_srgb(hdr))
