"""Latitude-longitude HDR light probes.

Rows run from straight up (+z, polar angle 0) to straight down; columns run
eastward from azimuth 0.  Each pixel stands for the direction at the center
of its band/sector, and its solid angle is the exact band integral, so the
solid angles of any probe sum to 4 pi.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, FormatError
from .nnet import autodiff as ad

DEFAULT_SMOOTHNESS_WEIGHT = 5e-6


def solid_angles(height, width):
    """Per-pixel solid angle map ``(H, W)``."""
    if height < 1 or width < 1:
        raise ContractViolation("probe dimensions must be positive")
    edges = np.linspace(0.0, np.pi, height + 1)
    band = (2.0 * np.pi / width) * (np.cos(edges[:-1]) - np.cos(edges[1:]))
    return np.repeat(band[:, None], width, axis=1)


def pixel_directions(height, width):
    """Unit direction ``(H, W, 3)`` at each pixel center."""
    theta = (np.arange(height) + 0.5) * np.pi / height
    phi = (np.arange(width) + 0.5) * 2.0 * np.pi / width
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    return np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)


@dataclass
class LightProbe:
    radiance: np.ndarray  # (H, W, 3) linear HDR

    def __post_init__(self):
        self.radiance = np.asarray(self.radiance)
        if self.radiance.ndim != 3 or self.radiance.shape[2] != 3:
            raise ContractViolation("probe radiance must be (H, W, 3)")
        if np.any(self.radiance < 0):
            raise ContractViolation("probe radiance must be non-negative")

    @property
    def height(self):
        return self.radiance.shape[0]

    @property
    def width(self):
        return self.radiance.shape[1]

    @property
    def solid_angles(self):
        return solid_angles(self.height, self.width)

    @property
    def directions(self):
        return pixel_directions(self.height, self.width)

    def flat(self):
        """``(K, 3)`` radiance, ``(K, 3)`` directions and ``(K,)`` solid angles."""
        return (self.radiance.reshape(-1, 3), self.directions.reshape(-1, 3),
                self.solid_angles.reshape(-1))

    @classmethod
    def constant(cls, height=16, width=32, value=0.5):
        return cls(np.full((height, width, 3), value, dtype=np.float64))


def probe_smoothness_loss(radiance, weight=DEFAULT_SMOOTHNESS_WEIGHT):
    """Weighted squared forward differences along rows and columns (no seam wrap).

    ``radiance`` may be an ``(H, W, 3)`` array or tensor.
    """
    dx = ad.sub(radiance[:, 1:], radiance[:, :-1])
    dy = ad.sub(radiance[1:], radiance[:-1])
    return ad.mul(ad.add(ad.sum_(ad.square(dx)), ad.sum_(ad.square(dy))), weight)


def olat_intensity(height, row, width):
    """Radiance making one pixel deliver the irradiance of a unit uniform probe (pi)."""
    return np.pi / solid_angles(height, width)[row, 0]


def make_olat(height, width, row, col, intensity=None):
    if not (0 <= row < height and 0 <= col < width):
        raise ContractViolation(f"OLAT pixel ({row}, {col}) outside {height}x{width} probe")
    if intensity is None:
        intensity = olat_intensity(height, row, width)
    if intensity <= 0:
        raise ContractViolation("OLAT intensity must be positive")
    rad = np.zeros((height, width, 3))
    rad[row, col] = intensity
    return LightProbe(rad)


def probe_upper_mean(probe):
    """Mean RGB over the top half of the rows (at least one row)."""
    rows = max(probe.height // 2, 1)
    return probe.radiance[:rows].reshape(-1, 3).mean(axis=0)


# -- tone mapping ----------------------------------------------------------------


def linear_to_srgb(x):
    """sRGB transfer function after clipping to [0, 1]; works on tensors."""
    x = ad.clip(x, 0.0, 1.0)
    xv = ad.value(x)
    toe = xv <= 0.0031308
    lin = ad.mul(x, 12.92)
    pw = ad.sub(ad.mul(ad.power(ad.maximum(x, 0.0031308), 1.0 / 2.4), 1.055), 0.055)
    return ad.where(toe, lin, pw)


def srgb_to_linear(y):
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, 1.0)
    return np.where(y <= 0.04045, y / 12.92, ((y + 0.055) / 1.055) ** 2.4)


def gamma_encode(x, gamma=2.2):
    return np.clip(np.asarray(x), 0.0, 1.0) ** (1.0 / gamma)


# -- Radiance RGBE ----------------------------------------------------------------


def _float_to_rgbe(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    v = rgb.max(axis=-1)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    nz = v >= 1e-32
    m, e = np.frexp(v[nz])
    scale = m * 256.0 / v[nz]
    out[nz, :3] = np.clip(np.floor(rgb[nz] * scale[:, None]), 0, 255).astype(np.uint8)
    out[nz, 3] = (e + 128).astype(np.uint8)
    return out


def _rgbe_to_float(rgbe):
    rgbe = np.asarray(rgbe)
    e = rgbe[..., 3].astype(np.int64)
    f = np.where(e > 0, np.ldexp(1.0, e - 136), 0.0)
    out = (rgbe[..., :3].astype(np.float64) + 0.5) * f[..., None]
    return np.where(e[..., None] > 0, out, 0.0)


def save_hdr(probe_or_image) -> bytes:
    """Encode an ``(H, W, 3)`` image (or probe) as flat-scanline Radiance RGBE."""
    img = probe_or_image.radiance if isinstance(probe_or_image, LightProbe) else np.asarray(probe_or_image)
    h, w = img.shape[:2]
    head = f"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {h} +X {w}\n".encode("ascii")
    return head + _float_to_rgbe(img).tobytes()


_RES = re.compile(rb"^-Y (\d+) \+X (\d+)$")


def _read_scanline(buf, pos, w):
    """Decode one scanline starting at ``pos``; returns ``(rgbe (W, 4), new_pos)``."""
    if pos + 4 > len(buf):
        raise FormatError("truncated scanline", pos)
    b0, b1, b2, b3 = buf[pos:pos + 4]
    if not (8 <= w < 32768 and b0 == 2 and b1 == 2 and not b2 & 0x80):
        end = pos + 4 * w
        if end > len(buf):
            raise FormatError("truncated flat scanline", pos)
        return np.frombuffer(buf, dtype=np.uint8, count=4 * w, offset=pos).reshape(w, 4), end
    if (b2 << 8 | b3) != w:
        raise FormatError("RLE scanline width mismatch", pos)
    pos += 4
    line = np.empty((4, w), dtype=np.uint8)
    for c in range(4):
        i = 0
        while i < w:
            if pos >= len(buf):
                raise FormatError("truncated RLE scanline", pos)
            count = buf[pos]
            pos += 1
            if count > 128:
                count -= 128
                if count > w - i or pos >= len(buf):
                    raise FormatError("bad RLE run", pos)
                line[c, i:i + count] = buf[pos]
                pos += 1
            else:
                if count == 0 or count > w - i or pos + count > len(buf):
                    raise FormatError("bad RLE literal", pos)
                line[c, i:i + count] = np.frombuffer(buf, dtype=np.uint8, count=count, offset=pos)
                pos += count
            i += count
    return line.T.copy(), pos


def load_hdr(buf) -> np.ndarray:
    """Decode Radiance RGBE bytes into a linear ``(H, W, 3)`` float image."""
    buf = bytes(buf)
    if not (buf.startswith(b"#?RADIANCE") or buf.startswith(b"#?RGBE")):
        raise FormatError("missing #?RADIANCE signature", 0)
    pos = 0
    fmt_ok = False
    while True:
        end = buf.find(b"\n", pos)
        if end < 0:
            raise FormatError("header not terminated", pos)
        line = buf[pos:end]
        if line.startswith(b"FORMAT="):
            if line != b"FORMAT=32-bit_rle_rgbe":
                raise FormatError(f"unsupported format {line.decode(errors='replace')}", pos)
            fmt_ok = True
        pos = end + 1
        if line == b"":
            break
    if not fmt_ok:
        raise FormatError("missing FORMAT line", pos)
    end = buf.find(b"\n", pos)
    m = _RES.match(buf[pos:end]) if end >= 0 else None
    if m is None:
        raise FormatError("missing or unsupported resolution line", pos)
    h, w = int(m.group(1)), int(m.group(2))
    pos = end + 1
    rows = []
    for _ in range(h):
        line, pos = _read_scanline(buf, pos, w)
        rows.append(line)
    return _rgbe_to_float(np.stack(rows)) if rows else np.zeros((0, w, 3))


def load_probe(path):
    from pathlib import Path
    path = Path(path)
    data = path.read_bytes()
    img = load_pfm(data) if path.suffix == ".pfm" else load_hdr(data)
    return LightProbe(np.maximum(img, 0.0))


# -- PFM -----------------------------------------------------------------------------


def save_pfm(image) -> bytes:
    """Little-endian colour PFM (rows stored bottom to top)."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    h, w = img.shape[:2]
    return f"PF\n{w} {h}\n-1.0\n".encode("ascii") + img[::-1].tobytes()


def load_pfm(buf) -> np.ndarray:
    buf = bytes(buf)
    parts = []
    pos = 0
    while len(parts) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PFM header", pos)
        parts.append(buf[start:pos])
    pos += 1
    if parts[0] not in (b"PF", b"Pf"):
        raise FormatError("bad PFM signature", 0)
    ch = 3 if parts[0] == b"PF" else 1
    w, h, scale = int(parts[1]), int(parts[2]), float(parts[3])
    dt = "<f4" if scale < 0 else ">f4"
    n = w * h * ch
    if len(buf) - pos != 4 * n:
        raise FormatError("PFM payload size mismatch", pos)
    img = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(h, w, ch)[::-1].astype(np.float32)
    return img if ch == 3 else img[..., 0]
