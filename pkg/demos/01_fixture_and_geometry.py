"""The synthetic scene and what distillation extracts from it.

A sphere rests on a slab under a probe with one bright pixel over a dim
ambient.  Distillation marches camera rays through the density field to get
expected surface points, normals from the density gradient, and per-light
visibility by marching toward every probe pixel.
"""

from pathlib import Path

import numpy as np

from invrender import pipeline
from invrender.scene_io import FixtureSpec, load_scene, png_write, to_uint8

OUT = Path("runs/demos")

# A roughness-parameterized material needs no BRDF checkpoint.
spec = FixtureSpec(material="roughness:0.3")
scene = OUT / "scene"
pipeline.synth(scene, spec)
ds = load_scene(scene / "manifest.json")
print(f"{len(ds.views)} views at {ds.width}x{ds.height}, probe {spec.probe_resolution[0]}x{spec.probe_resolution[1]}")

distill = OUT / "distill"
pipeline.distill(scene, distill, spec.n_samples, spec.vis_samples)

view = ds.views[0]
geom = pipeline.load_buffers(distill, view.name)
hit = geom.hit_mask()
print(f"{view.name}: {hit.mean():.0%} of pixels hit the surface")

# Visibility of the bright pixel: the sphere's shadow on the slab.
h, w = spec.probe_resolution
bright = spec.bright_pixel[0] * w + spec.bright_pixel[1]
vis = geom.visibility[..., bright]
print(f"points shadowed from the bright light: {(vis[hit] < 0.5).mean():.0%}")

# Ambient occlusion is the mean visibility over all light directions.
ao = geom.visibility.mean(axis=-1)
print(f"ambient occlusion ranges from {ao[hit].min():.2f} to {ao[hit].max():.2f}")

png_write(OUT / "normals.png", to_uint8(np.where(hit[..., None], 0.5 * (geom.normal + 1), 0)))
png_write(OUT / "shadow.png", to_uint8(np.repeat(vis[..., None] * hit[..., None], 3, axis=-1)))
png_write(OUT / "ao.png", to_uint8(np.repeat((ao * hit)[..., None], 3, axis=-1)))
print(f"wrote normals.png, shadow.png and ao.png to {OUT}")
