"""A latent BRDF prior fitted to tabulated materials.

One decoder plus one code per material is fitted to the log of the
reflectance tables.  New materials come from mixing codes.
"""

from pathlib import Path

import numpy as np

from invrender import pipeline
from invrender.brdf import bin_coords, eval_learned, log_rmse

OUT = Path("runs/demos")

mats = pipeline.synthetic_materials()
print("materials:", ", ".join(m.name for m in mats))

model = pipeline.brdf_pretrain(OUT / "brdf", pipeline.desk_glo_config())
for m in mats:
    print(f"  {m.name:12s} log-RMSE {log_rmse(model, m):.4f}")

# Reflectance in the first bin (half vector on the normal), for codes between matte and glossy.
coords = bin_coords()[:1]
matte, glossy = model.code("lambertian"), model.code("ggx_0.1")
for t in np.linspace(0, 1, 5):
    z = (1 - t) * matte + t * glossy
    r = float(eval_learned(model, z, coords)[0])
    print(f"  mix {t:.2f}: reflectance in the first bin {r:.3f}")
