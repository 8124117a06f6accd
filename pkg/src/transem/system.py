"""2D parallel-beam scanner model: Siddon ray tracing, sparse system matrix,
Gaussian resolution blur, forward/back projection and sensitivity.

Geometry conventions
--------------------
The image is a square ``image_size x image_size`` grid of ``pixel_size_mm``
pixels centered on the origin.  Pixel ``(row, col)`` (row-major flattening
``j = row * image_size + col``) has its center at

    x = (col - (n - 1) / 2) * pixel_size_mm
    y = (row - (n - 1) / 2) * pixel_size_mm

Projection angles span [0, pi) uniformly.  For angle ``theta`` the detector
axis points along ``(cos theta, sin theta)``; rays travel along the
perpendicular ``(-sin theta, cos theta)`` and are offset from the origin by
the centered bin coordinate.  Sinograms are ``(n_angles, n_bins)`` arrays and
ray ``i = angle * n_bins + bin`` is row ``i`` of the system matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.ndimage
import scipy.sparse

__all__ = [
    "ScannerGeometry2D",
    "SparseSystemMatrix",
    "SystemModel",
    "SubsetOperator",
    "siddon_trace",
    "build_system_matrix",
    "gaussian_blur",
    "fwhm_to_sigma",
    "geometry_to_dict",
    "geometry_from_dict",
    "save_geometry",
    "load_geometry",
    "save_system_matrix",
    "load_system_matrix",
]

# FWHM of a Gaussian equals 2*sqrt(2*ln 2) standard deviations
_FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

_SSM_MAGIC = b"SSM1"


def fwhm_to_sigma(fwhm):
    return fwhm / _FWHM_PER_SIGMA


@dataclass(frozen=True)
class ScannerGeometry2D:
    """Uniform-angle parallel-beam geometry with a centered detector array."""

    n_angles: int
    n_bins: int
    bin_spacing_mm: float
    image_size: int
    pixel_size_mm: float

    def __post_init__(self):
        if self.n_angles < 1 or self.n_bins < 1 or self.image_size < 1:
            raise ValueError("geometry counts must be >= 1")
        if self.bin_spacing_mm <= 0 or self.pixel_size_mm <= 0:
            raise ValueError("geometry spacings must be positive")

    @property
    def n_rays(self):
        return self.n_angles * self.n_bins

    @property
    def n_pixels(self):
        return self.image_size * self.image_size

    @property
    def half_extent_mm(self):
        return 0.5 * self.image_size * self.pixel_size_mm

    def angle(self, index):
        return math.pi * index / self.n_angles

    def bin_offset(self, index):
        return (index - 0.5 * (self.n_bins - 1)) * self.bin_spacing_mm

    def pixel_centers(self):
        """Coordinate grids (X, Y) of pixel centers in mm, shape (n, n)."""
        n = self.image_size
        coords = (np.arange(n) - 0.5 * (n - 1)) * self.pixel_size_mm
        x = np.broadcast_to(coords[None, :], (n, n))
        y = np.broadcast_to(coords[:, None], (n, n))
        return x, y


def siddon_trace(angle_index, bin_index, geometry, min_length=1e-12):
    """Exact ray/grid intersection lengths for one detector ray.

    Returns ``(pixel_indices, lengths_mm)`` sorted by flattened pixel index.
    The ray is traced parametrically through the pixel grid; segment lengths
    sum to the chord length of the ray through the grid bounding box.  A ray
    that misses the grid yields empty arrays.
    """
    if not (0 <= angle_index < geometry.n_angles):
        raise ValueError(f"angle index {angle_index} outside geometry")
    if not (0 <= bin_index < geometry.n_bins):
        raise ValueError(f"bin index {bin_index} outside geometry")

    theta = geometry.angle(angle_index)
    offset = geometry.bin_offset(bin_index)
    dx, dy = -math.sin(theta), math.cos(theta)
    px, py = offset * math.cos(theta), offset * math.sin(theta)
    half = geometry.half_extent_mm
    pitch = geometry.pixel_size_mm
    n = geometry.image_size
    empty = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))

    # slab intersection of the ray with the grid bounding box
    t_lo, t_hi = -np.inf, np.inf
    for pos, direction in ((px, dx), (py, dy)):
        if abs(direction) < 1e-15:
            if not (-half <= pos <= half):
                return empty
        else:
            t1 = (-half - pos) / direction
            t2 = (half - pos) / direction
            t_lo = max(t_lo, min(t1, t2))
            t_hi = min(t_hi, max(t1, t2))
    if not (t_hi - t_lo > min_length):
        return empty

    # parameter values where the ray crosses pixel grid lines
    lines = -half + pitch * np.arange(n + 1)
    crossings = [np.array([t_lo, t_hi])]
    for pos, direction in ((px, dx), (py, dy)):
        if abs(direction) >= 1e-15:
            t = (lines - pos) / direction
            crossings.append(t[(t > t_lo) & (t < t_hi)])
    ts = np.sort(np.concatenate(crossings))

    lengths = np.diff(ts)
    mids = 0.5 * (ts[:-1] + ts[1:])
    cols = np.floor((px + mids * dx + half) / pitch).astype(np.int64)
    rows = np.floor((py + mids * dy + half) / pitch).astype(np.int64)
    keep = (
        (lengths > min_length)
        & (cols >= 0)
        & (cols < n)
        & (rows >= 0)
        & (rows < n)
    )
    if not keep.any():
        return empty
    pixels = rows[keep] * n + cols[keep]
    lengths = lengths[keep]

    # canonical form: entries sorted by pixel index, duplicates merged
    unique, inverse = np.unique(pixels, return_inverse=True)
    merged = np.bincount(inverse, weights=lengths, minlength=unique.size)
    return unique, merged


@dataclass
class SparseSystemMatrix:
    """Row-compressed system matrix; row i holds the Siddon trace of ray i.

    Rows are stored with columns ascending and strictly positive values,
    which makes matrix products bitwise reproducible.
    """

    n_rays: int
    n_pixels: int
    row_offsets: np.ndarray  # uint64, len n_rays + 1
    col_indices: np.ndarray  # uint32
    values: np.ndarray  # float64

    @property
    def nnz(self):
        return int(self.values.size)

    def row(self, i):
        lo, hi = int(self.row_offsets[i]), int(self.row_offsets[i + 1])
        return self.col_indices[lo:hi], self.values[lo:hi]

    def to_csr(self):
        return scipy.sparse.csr_matrix(
            (self.values, self.col_indices.astype(np.int64), self.row_offsets.astype(np.int64)),
            shape=(self.n_rays, self.n_pixels),
        )


def build_system_matrix(geometry):
    """Trace every (angle, bin) ray and assemble the sparse matrix."""
    offsets = np.zeros(geometry.n_rays + 1, dtype=np.uint64)
    cols, vals = [], []
    i = 0
    for a in range(geometry.n_angles):
        for b in range(geometry.n_bins):
            pixels, lengths = siddon_trace(a, b, geometry)
            cols.append(pixels)
            vals.append(lengths)
            offsets[i + 1] = offsets[i] + pixels.size
            i += 1
    col_indices = (
        np.concatenate(cols).astype(np.uint32) if cols else np.empty(0, np.uint32)
    )
    values = np.concatenate(vals) if vals else np.empty(0, np.float64)
    return SparseSystemMatrix(
        n_rays=geometry.n_rays,
        n_pixels=geometry.n_pixels,
        row_offsets=offsets,
        col_indices=col_indices,
        values=values,
    )


def _gaussian_kernel(sigma_px):
    radius = int(math.ceil(4.0 * sigma_px))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma_px) ** 2)
    return kernel / kernel.sum()


def gaussian_blur(image, fwhm_mm, pixel_size_mm):
    """Separable Gaussian blur with zero padding; ``fwhm_mm=0`` is the identity.

    The 1-d kernel is a sampled Gaussian truncated at four standard
    deviations and renormalized to sum one, so constants are preserved away
    from the borders.  The kernel is symmetric, which makes the blur its own
    adjoint under zero padding.
    """
    if fwhm_mm < 0:
        raise ValueError("fwhm must be nonnegative")
    if fwhm_mm == 0.0:
        return np.array(image, dtype=np.float64)
    sigma_px = fwhm_to_sigma(fwhm_mm) / pixel_size_mm
    kernel = _gaussian_kernel(sigma_px)
    out = scipy.ndimage.convolve1d(
        np.asarray(image, dtype=np.float64), kernel, axis=0, mode="constant", cval=0.0
    )
    return scipy.ndimage.convolve1d(out, kernel, axis=1, mode="constant", cval=0.0)


@dataclass
class SubsetOperator:
    """Projection restricted to an interleaved subset of angles.

    Bundles the subset rows of the system matrix with their sensitivity
    image and the masks used by EM-style updates, so reconstruction loops
    share one deterministic code path.
    """

    angles: np.ndarray
    _forward_csr: scipy.sparse.csr_matrix
    _adjoint_csr: scipy.sparse.csr_matrix
    _model: "SystemModel"
    sensitivity: np.ndarray
    mask: np.ndarray  # 1.0 where the subset sensitivity is positive
    inv_mask: np.ndarray
    safe_sensitivity: np.ndarray  # sensitivity with 1.0 filled on masked pixels

    def slice_sinogram(self, sino):
        return sino[self.angles, :]

    def forward(self, image):
        """Project an image to this subset's sinogram rows (PSF included)."""
        blurred = self._model.blur(image)
        flat = self._forward_csr @ blurred.ravel()
        return flat.reshape(self.angles.size, self._model.geometry.n_bins)

    def back(self, sub_sino):
        """Adjoint of :meth:`forward`."""
        n = self._model.geometry.image_size
        img = (self._adjoint_csr @ np.asarray(sub_sino).ravel()).reshape(n, n)
        return self._model.blur(img)


class SystemModel:
    """Immutable bundle of geometry, system matrix and resolution model."""

    def __init__(self, geometry, psf_fwhm_mm=0.0, matrix=None):
        if psf_fwhm_mm < 0:
            raise ValueError("psf_fwhm_mm must be nonnegative")
        self.geometry = geometry
        self.psf_fwhm_mm = float(psf_fwhm_mm)
        self.matrix = matrix if matrix is not None else build_system_matrix(geometry)
        if self.matrix.n_pixels != geometry.n_pixels or self.matrix.n_rays != geometry.n_rays:
            raise ValueError("system matrix does not match geometry")
        self._csr = self.matrix.to_csr()
        self._csr_t = self._csr.T.tocsr()
        self._sensitivity = None
        self._subset_cache = {}

    def blur(self, image):
        return gaussian_blur(image, self.psf_fwhm_mm, self.geometry.pixel_size_mm)

    def _check_image(self, image):
        n = self.geometry.image_size
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (n, n):
            raise ValueError(f"image shape {image.shape} does not match grid {(n, n)}")
        return image

    def _check_sinogram(self, sino):
        shape = (self.geometry.n_angles, self.geometry.n_bins)
        sino = np.asarray(sino, dtype=np.float64)
        if sino.shape != shape:
            raise ValueError(f"sinogram shape {sino.shape} does not match {shape}")
        return sino

    def forward_project(self, image):
        """Expected geometric counts A @ blur(x) as an (angles, bins) array."""
        image = self._check_image(image)
        flat = self._csr @ self.blur(image).ravel()
        return flat.reshape(self.geometry.n_angles, self.geometry.n_bins)

    def back_project(self, sino):
        """Exact adjoint of :meth:`forward_project`."""
        sino = self._check_sinogram(sino)
        n = self.geometry.image_size
        img = (self._csr_t @ sino.ravel()).reshape(n, n)
        return self.blur(img)

    def sensitivity_image(self):
        """Per-pixel total detection weight, cached after the first call."""
        if self._sensitivity is None:
            ones = np.ones((self.geometry.n_angles, self.geometry.n_bins))
            self._sensitivity = self.back_project(ones)
            self._sensitivity.setflags(write=False)
        return self._sensitivity

    @property
    def pixel_mask(self):
        """1.0 on pixels seen by at least one ray, 0.0 elsewhere."""
        return (self.sensitivity_image() > 0).astype(np.float64)

    def subsets(self, n_subsets):
        """Interleaved angle subsets: angle a belongs to subset a mod n."""
        if not (1 <= n_subsets <= self.geometry.n_angles):
            raise ValueError(
                f"n_subsets must be in [1, {self.geometry.n_angles}], got {n_subsets}"
            )
        if n_subsets not in self._subset_cache:
            ops = []
            n = self.geometry.image_size
            n_bins = self.geometry.n_bins
            for k in range(n_subsets):
                angles = np.arange(k, self.geometry.n_angles, n_subsets)
                rows = (angles[:, None] * n_bins + np.arange(n_bins)[None, :]).ravel()
                csr = self._csr[rows, :]
                csr_t = csr.T.tocsr()
                ones = np.ones(rows.size)
                sens = self.blur((csr_t @ ones).reshape(n, n))
                mask = (sens > 0).astype(np.float64)
                ops.append(
                    SubsetOperator(
                        angles=angles,
                        _forward_csr=csr,
                        _adjoint_csr=csr_t,
                        _model=self,
                        sensitivity=sens,
                        mask=mask,
                        inv_mask=1.0 - mask,
                        safe_sensitivity=np.where(sens > 0, sens, 1.0),
                    )
                )
            self._subset_cache[n_subsets] = tuple(ops)
        return self._subset_cache[n_subsets]

    @property
    def full_data_operator(self):
        return self.subsets(1)[0]


# ---------------------------------------------------------------------------
# serialization


def geometry_to_dict(geometry, psf_fwhm_mm=0.0):
    return {
        "n_angles": geometry.n_angles,
        "n_bins": geometry.n_bins,
        "bin_spacing_mm": geometry.bin_spacing_mm,
        "image_size": geometry.image_size,
        "pixel_size_mm": geometry.pixel_size_mm,
        "psf_fwhm_mm": psf_fwhm_mm,
    }


def geometry_from_dict(doc):
    geometry = ScannerGeometry2D(
        n_angles=int(doc["n_angles"]),
        n_bins=int(doc["n_bins"]),
        bin_spacing_mm=float(doc["bin_spacing_mm"]),
        image_size=int(doc["image_size"]),
        pixel_size_mm=float(doc["pixel_size_mm"]),
    )
    return geometry, float(doc.get("psf_fwhm_mm", 0.0))


def save_geometry(path, geometry, psf_fwhm_mm=0.0):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(geometry_to_dict(geometry, psf_fwhm_mm), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_geometry(path):
    with open(path, "r", encoding="utf-8") as fh:
        return geometry_from_dict(json.load(fh))


def save_system_matrix(path, matrix):
    """Write the SSM1 container: magic, u64 I/J/nnz, then the three arrays."""
    with open(path, "wb") as fh:
        fh.write(_SSM_MAGIC)
        header = np.array([matrix.n_rays, matrix.n_pixels, matrix.nnz], dtype="<u8")
        fh.write(header.tobytes())
        fh.write(matrix.row_offsets.astype("<u8").tobytes())
        fh.write(matrix.col_indices.astype("<u4").tobytes())
        fh.write(matrix.values.astype("<f8").tobytes())


def load_system_matrix(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _SSM_MAGIC:
            raise ValueError(f"not an SSM1 file: magic {magic!r}")
        n_rays, n_pixels, nnz = np.frombuffer(fh.read(24), dtype="<u8")
        row_offsets = np.frombuffer(fh.read(8 * (int(n_rays) + 1)), dtype="<u8").copy()
        col_indices = np.frombuffer(fh.read(4 * int(nnz)), dtype="<u4").copy()
        values = np.frombuffer(fh.read(8 * int(nnz)), dtype="<f8").copy()
    return SparseSystemMatrix(
        n_rays=int(n_rays),
        n_pixels=int(n_pixels),
        row_offsets=row_offsets,
        col_indices=col_indices.astype(np.uint32),
        values=values,
    )
