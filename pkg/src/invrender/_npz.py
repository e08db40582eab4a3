"""Reproducible ``.npz`` writing (fixed zip timestamps, no compression jitter)."""

from __future__ import annotations

import io
import zipfile

import numpy as np


def save_npz(path, **arrays):
    """Like :func:`numpy.savez_compressed` but byte-identical for identical inputs."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
