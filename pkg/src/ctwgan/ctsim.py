"""Parallel-beam CT simulator: phantoms, projection, noise, FBP, file I/O.

Images are square numpy float arrays in reconstruction space; sinograms
carry their projection geometry. All operations are pure given the seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

IMAGE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Ellipse:
    cy: float        # center, in [-1, 1] image coordinates
    cx: float
    ry: float        # semi-axes, same units
    rx: float
    angle: float     # rotation, radians
    intensity: float  # additive


@dataclass(frozen=True)
class PhantomSpec:
    ellipses: tuple
    background: float = 0.0
    # intra-tissue texture: a smooth zero-mean random field added inside the
    # phantom support, so ground-truth images carry fine-scale structure
    texture_amplitude: float = 0.0
    texture_scale: float = 1.5   # correlation length, pixels
    texture_seed: int = 0


@dataclass(frozen=True)
class ProjectionGeometry:
    n_angles: int
    n_detectors: int
    spacing: float = 1.0
    angles: np.ndarray = None

    def __post_init__(self):
        if self.angles is None:
            object.__setattr__(
                self, "angles",
                np.arange(self.n_angles) * np.pi / self.n_angles)
        if np.any(np.diff(self.angles) <= 0):
            raise ValueError("angles must be strictly increasing")


@dataclass
class Sinogram:
    values: np.ndarray           # (n_angles, n_detectors)
    geometry: ProjectionGeometry

    def __post_init__(self):
        expected = (self.geometry.n_angles, self.geometry.n_detectors)
        if self.values.shape != expected:
            raise ValueError(f"sinogram shape {self.values.shape} does not "
                             f"match geometry {expected}")


@dataclass(frozen=True)
class NoiseModel:
    n0: float = 1e4              # incident photons per ray
    sigma: float = 5.0           # electronic noise, counts
    seed: int = 0
    # attenuation per unit line integral; maps pixel-unit integrals to a
    # physically plausible optical depth before the count statistics
    mu_scale: float = 1.0

    def __post_init__(self):
        if self.n0 <= 0:
            raise ValueError("n0 must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def default_geometry(size, n_angles=180):
    """Geometry covering a size x size image: detectors span the diagonal."""
    n_det = int(np.ceil(size * np.sqrt(2))) + 1
    return ProjectionGeometry(n_angles=n_angles, n_detectors=n_det)


def make_phantom(spec: PhantomSpec, size):
    """Rasterize ellipses on a size x size grid, clipped to [0, 1].

    A pixel belongs to an ellipse iff the normalized quadratic form at its
    center is <= 1. Coordinates run over [-1, 1] in both axes.
    """
    if size < 16:
        raise ValueError("size must be >= 16")
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = np.full((size, size), spec.background, dtype=np.float64)
    for e in spec.ellipses:
        c, s = np.cos(e.angle), np.sin(e.angle)
        dy, dx = yy - e.cy, xx - e.cx
        u = c * dx + s * dy
        v = -s * dx + c * dy
        inside = (u / e.rx) ** 2 + (v / e.ry) ** 2 <= 1.0
        img[inside] += e.intensity
    if spec.texture_amplitude > 0.0:
        field = _smooth_field(size, spec.texture_scale, spec.texture_seed)
        img = img + spec.texture_amplitude * field * (img > 0.05)
    return np.clip(img, 0.0, 1.0)


def _smooth_field(size, scale, seed):
    """Unit-variance Gaussian random field with correlation length `scale`."""
    rng = np.random.default_rng(seed)
    white = rng.standard_normal((size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    filt = np.exp(-2.0 * (np.pi * scale) ** 2 * (fy ** 2 + fx ** 2))
    field = np.fft.irfft2(np.fft.rfft2(white) * filt, s=(size, size))
    std = field.std()
    return field / std if std > 0 else field


def random_phantom_spec(rng, n_ellipses=None):
    """Random spec with 3-8 ellipses; used by the synthetic dataset."""
    if n_ellipses is None:
        n_ellipses = int(rng.integers(3, 9))
    body = float(rng.uniform(0.90, 0.96))
    ellipses = [Ellipse(cy=0.0, cx=0.0, ry=body, rx=body, angle=0.0,
                        intensity=float(rng.uniform(0.15, 0.35)))]
    for _ in range(n_ellipses):
        ellipses.append(Ellipse(
            cy=float(rng.uniform(-0.5, 0.5)),
            cx=float(rng.uniform(-0.5, 0.5)),
            ry=float(rng.uniform(0.05, 0.4)),
            rx=float(rng.uniform(0.05, 0.4)),
            angle=float(rng.uniform(0, np.pi)),
            intensity=float(rng.uniform(-0.25, 0.45)),
        ))
    return PhantomSpec(
        tuple(ellipses),
        texture_amplitude=float(rng.uniform(0.15, 0.20)),
        texture_scale=float(rng.uniform(0.7, 1.5)),
        texture_seed=int(rng.integers(2 ** 31)),
    )


def _square_footprint(u, a, b):
    """Chord length of a unit square vs perpendicular ray offset u.

    a = max(|cos|, |sin|), b = min(...). The footprint is the convolution
    of two boxes: a trapezoid with plateau (a-b), base (a+b), height 1/a.

    For near-axis-aligned rays the trapezoid degenerates to a box whose
    step edge can coincide exactly with pixel boundaries; rays on the edge
    get half weight so adjacent detectors share the column consistently.
    """
    au = np.abs(u)
    if b < 1e-9:
        edge = a / 2.0
        inside = np.where(au < edge - 1e-9, 1.0, 0.5)
        return np.where(au > edge + 1e-9, 0.0, inside) / a
    ramp = np.clip(((a + b) / 2.0 - au) / b, 0.0, 1.0)
    return np.where(au <= (a - b) / 2.0, 1.0, ramp) / a


def radon(image, geometry: ProjectionGeometry):
    """Parallel-beam line integrals, exact for the pixel-cell model.

    Each pixel is a unit square of constant value; a sinogram entry is the
    sum over pixels of value times the exact ray/square intersection
    length, accumulated per angle via the square's trapezoid footprint on
    the detector axis.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    diag = np.hypot(h, w)
    if geometry.n_detectors * geometry.spacing < diag:
        raise ValueError("detector row too narrow to cover the image")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    xs = xs.ravel()
    ys = ys.ravel()
    vals = image.ravel()
    spacing = geometry.spacing
    center = (geometry.n_detectors - 1) / 2.0
    n_det = geometry.n_detectors
    # footprint half-width is <= sqrt(2)/2 pixels; nearest index is off by
    # at most half a detector spacing
    reach = int(np.floor(0.7072 / spacing + 0.5))
    sino = np.zeros((geometry.n_angles, n_det), dtype=np.float64)
    for ang, theta in enumerate(geometry.angles):
        c, s = np.cos(theta), np.sin(theta)
        a = max(abs(c), abs(s))
        b = min(abs(c), abs(s))
        idx = (xs * c + ys * s) / spacing + center
        nearest = np.round(idx).astype(np.int64)
        for k in range(-reach, reach + 1):
            det_idx = nearest + k
            u = (idx - det_idx) * spacing
            wgt = vals * _square_footprint(u, a, b)
            ok = (det_idx >= 0) & (det_idx < n_det)
            sino[ang] += np.bincount(det_idx[ok], weights=wgt[ok],
                                     minlength=n_det)
    return Sinogram(sino, geometry)


def apply_noise(sino: Sinogram, model: NoiseModel):
    """Photon-count noise: Poisson on transmitted counts plus Gaussian
    electronic noise, mapped back to line integrals."""
    p = sino.values * model.mu_scale
    if np.any(p < -1e-9):
        raise ValueError("line integrals must be non-negative")
    rng = np.random.default_rng(model.seed)
    counts = rng.poisson(model.n0 * np.exp(-np.maximum(p, 0.0))).astype(np.float64)
    if model.sigma > 0:
        counts += rng.normal(0.0, model.sigma, size=counts.shape)
    counts = np.maximum(counts, 0.5)     # photon-starvation guard
    return Sinogram(-np.log(counts / model.n0) / model.mu_scale, sino.geometry)


def _ramp_filter(n, kind="ram-lak"):
    freqs = np.fft.fftfreq(n)
    filt = 2.0 * np.abs(freqs)
    if kind == "hann":
        filt *= 0.5 * (1.0 + np.cos(2.0 * np.pi * freqs))
    elif kind != "ram-lak":
        raise ValueError(f"unknown filter kind: {kind!r}")
    return filt


def fbp(sino: Sinogram, size=None, filter_kind="ram-lak"):
    """Filtered backprojection onto a size x size grid.

    Ramp filtering happens on a zero-padded grid (>= 2x detectors) to
    suppress circular-convolution wrap.
    """
    geom = sino.geometry
    if geom.n_angles < 2:
        raise ValueError("need at least 2 projection angles")
    if size is None:
        size = int(np.floor(geom.n_detectors / np.sqrt(2)))
    n_det = geom.n_detectors
    n_pad = 1 << int(np.ceil(np.log2(2 * n_det)))
    filt = _ramp_filter(n_pad, filter_kind)
    padded = np.zeros((geom.n_angles, n_pad), dtype=np.float64)
    padded[:, :n_det] = sino.values
    filtered = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * filt[None, :],
                                   axis=1))[:, :n_det]

    cy = cx = (size - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(size) - cy, np.arange(size) - cx,
                         indexing="ij")
    recon = np.zeros((size, size), dtype=np.float64)
    center = (n_det - 1) / 2.0
    for a, theta in enumerate(geom.angles):
        c, s = np.cos(theta), np.sin(theta)
        t = (xs * c + ys * s) / geom.spacing + center
        t0 = np.clip(np.floor(t).astype(np.int64), 0, n_det - 2)
        frac = np.clip(t - t0, 0.0, 1.0)
        prof = filtered[a]
        recon += prof[t0] * (1 - frac) + prof[t0 + 1] * frac
    return recon * np.pi / (2.0 * geom.n_angles)


# -- portable file formats -------------------------------------------------

def save_image(image, path, window=(0.0, 1.0)):
    """Raw little-endian float32 + JSON sidecar; also writes a PGM preview."""
    image = np.asarray(image)
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(image.astype("<f4").tobytes())
    header = {"height": int(image.shape[0]), "width": int(image.shape[1]),
              "dtype": "<f4", "version": IMAGE_FORMAT_VERSION,
              "window": list(window)}
    with open(path + ".json", "w") as fh:
        json.dump(header, fh)
    save_pgm(image, path + ".pgm", window)


def load_image(path):
    path = str(path)
    with open(path + ".json") as fh:
        header = json.load(fh)
    if header.get("version") != IMAGE_FORMAT_VERSION:
        raise ValueError(f"unsupported image version: {header.get('version')}")
    h, w = header["height"], header["width"]
    raw = open(path, "rb").read()
    expected = h * w * 4
    if len(raw) != expected:
        raise ValueError(f"payload is {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64)


def save_pgm(image, path, window=(0.0, 1.0)):
    """8-bit P5 preview with a fixed intensity window."""
    lo, hi = window
    scaled = np.clip((np.asarray(image) - lo) / max(hi - lo, 1e-12), 0, 1)
    byte = (scaled * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(byte.tobytes())


def save_sinogram(sino: Sinogram, path):
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(sino.values.astype("<f4").tobytes())
    header = {"n_angles": sino.geometry.n_angles,
              "n_detectors": sino.geometry.n_detectors,
              "spacing": sino.geometry.spacing,
              "angles": list(map(float, sino.geometry.angles)),
              "dtype": "<f4", "version": IMAGE_FORMAT_VERSION}
    with open(path + ".json", "w") as fh:
        json.dump(header, fh)


def load_sinogram(path):
    path = str(path)
    with open(path + ".json") as fh:
        header = json.load(fh)
    geom = ProjectionGeometry(n_angles=header["n_angles"],
                              n_detectors=header["n_detectors"],
                              spacing=header["spacing"],
                              angles=np.asarray(header["angles"]))
    raw = open(path, "rb").read()
    expected = geom.n_angles * geom.n_detectors * 4
    if len(raw) != expected:
        raise ValueError(f"payload is {len(raw)} bytes, header implies {expected}")
    values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return Sinogram(values.reshape(geom.n_angles, geom.n_detectors), geom)
