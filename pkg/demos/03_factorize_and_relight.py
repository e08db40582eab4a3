"""Recover normals, visibility, albedo, material and light from the images.

Needs the outputs of the first two demos.  Training uses the desk preset and
takes a few minutes on one core.
"""

from pathlib import Path

from invrender import pipeline
from invrender.scene_io import FixtureSpec

OUT = Path("runs/demos")

brdf = pipeline.load_brdf(OUT / "brdf")
# Re-synthesize with a material from the prior so the inverse problem is
# exactly representable.
scene = OUT / "scene_prior"
pipeline.synth(scene, FixtureSpec(), brdf)
# The geometry is unchanged, so the buffers from the first demo still apply.
distill = OUT / "distill"

config = pipeline.desk_factor_config()
model, pre, joint = pipeline.train_model(scene, distill, brdf, config, OUT / "model")
print(f"geometry loss {pre[0]['total']:.4f} -> {pre[-1]['total']:.4f}")
print(f"joint loss    {joint[0]['total']:.4f} -> {joint[-1]['total']:.4f}")

report, _ = pipeline.evaluate(model, scene, distill)
print(report.summary())

relit, _ = pipeline.relight_psnr(model, scene, distill, brdf, [(2, 5), (1, 10)])
print(f"held-out OLAT relighting: {relit:.2f} dB")

pipeline.relight(model, scene, distill, OUT / "relight", probes=["sky", "uniform"], olats=[(2, 5)])
pipeline.edit(model, scene, distill, OUT / "edit", albedo=(0.8, 0.2, 0.2), code=brdf.code("ggx_0.1"))
print(f"relit and edited renders in {OUT}")
