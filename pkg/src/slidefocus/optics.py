"""Procedural slide phantom, defocus rendering, and focus oracles.

The simulator stands in for a physical brightfield microscope: it produces
tissue-like RGB slides with a known per-pixel optimal focal surface, renders
defocused views through a Gaussian point-spread surrogate whose radius grows
linearly with defocus distance, and exposes gradient- and spectrum-based
sharpness oracles used as ground truth everywhere else in the package.

Sign information is carried by small per-channel focal-plane offsets
(red focuses below, blue above the green reference plane), so a single
defocused frame is not symmetric about the focal plane.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ParameterError, RegionError, SpectrumUndefinedError

# Stain palette, chosen dark enough that a half-tissue field of view stays
# below the default emptiness threshold (mean HSV-value <= 0.9) and with
# comparable R/B contrast so channel sharpness tracks blur, not content.
_EOSIN = np.array([0.64, 0.38, 0.44], dtype=np.float32)
_HEMATOXYLIN = np.array([0.40, 0.24, 0.60], dtype=np.float32)
_NUCLEUS = np.array([0.28, 0.16, 0.38], dtype=np.float32)

_BACKGROUND_MEAN = 0.965
_BACKGROUND_FLOOR = 0.92  # invariant: non-tissue pixels stay at or above this

_SIGMA_LADDER_STEP_PX = 0.25
_SIGMA_LADDER_MAX_LEVELS = 12

# Focal-stack protocols: the desk-scale default keeps runs fast; the full
# 1000-slice protocol (500 slices below and above the plane) is available by
# name but never the default.
STACK_PRESETS = {
    "desk": {"n_slices": 21, "z_range_um": 20.0},
    "full": {"n_slices": 1000, "z_range_um": 20.0},
}


@dataclass(frozen=True)
class OpticsConfig:
    """Parameters of the virtual objective, sensor, and stack protocol.

    Attributes
    ----------
    dof_um : depth of field in micrometers.
    blur_gain_k : Gaussian blur radius gained per micrometer of defocus (px/um).
    chroma_offset_um : per-channel focal offset delta; channel planes sit at
        (-delta, 0, +delta) for (R, G, B), which makes the defocus sign
        observable in a single frame.
    noise_sigma : std of additive sensor noise, in [0, 1] intensity units.
    seed : base seed for every stochastic rendering decision.
    """

    dof_um: float = 4.0
    blur_gain_k: float = 0.5
    chroma_offset_um: float = 1.0
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.dof_um <= 0:
            raise ParameterError(f"dof_um must be > 0, got {self.dof_um}")
        if self.blur_gain_k <= 0:
            raise ParameterError(f"blur_gain_k must be > 0, got {self.blur_gain_k}")
        if self.chroma_offset_um < 0:
            raise ParameterError("chroma_offset_um must be >= 0")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")

    @property
    def channel_offsets_um(self) -> tuple[float, float, float]:
        d = self.chroma_offset_um
        return (-d, 0.0, +d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def optics_hash(optics: OpticsConfig) -> str:
    """Stable short hash of an optics configuration, for dataset headers."""
    blob = json.dumps(optics.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Region:
    """Axis-aligned pixel window on a slide: (row0, col0, height, width)."""

    row0: int
    col0: int
    height: int
    width: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ParameterError(f"region must have positive size, got {self}")

    @property
    def row1(self) -> int:
        return self.row0 + self.height

    @property
    def col1(self) -> int:
        return self.col0 + self.width

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.row0, self.col0, self.height, self.width)


@dataclass
class VirtualSlide:
    """Tissue phantom with per-pixel ground truth.

    sharp_image : (H, W, 3) float32 in [0, 1], the in-focus appearance.
    focal_surface : (H, W) float32, optimal stage z per pixel in micrometers,
        zero-mean across the slide (the stage datum is the mean focal plane).
    tissue_mask : (H, W) bool, True where stained tissue was painted.
    physical_extent : (width_mm, height_mm) of the slide.
    """

    sharp_image: np.ndarray
    focal_surface: np.ndarray
    tissue_mask: np.ndarray
    physical_extent: tuple[float, float]

    @property
    def size_px(self) -> tuple[int, int]:
        return self.sharp_image.shape[:2]

    def check_region(self, region: Region) -> Region:
        h, w = self.size_px
        if region.row0 < 0 or region.col0 < 0 or region.row1 > h or region.col1 > w:
            raise RegionError(f"region {region} outside slide of size {h}x{w}")
        return region

    def mean_focal_um(self, region: Region | None = None) -> float:
        """Mean optimal stage z over a region (whole slide when omitted)."""
        if region is None:
            return float(self.focal_surface.mean())
        self.check_region(region)
        window = self.focal_surface[region.row0:region.row1, region.col0:region.col1]
        return float(window.mean())


@dataclass
class FocalStack:
    """Images of one field of view at signed offsets from its focal plane."""

    images: list[np.ndarray]
    z_offsets_um: list[float]
    optics: OpticsConfig
    slide_id: str = ""
    fov_id: str = ""
    region: Region | None = None
    slice_paths: list[str] | None = field(default=None)

    def __post_init__(self):
        if len(self.images) != len(self.z_offsets_um):
            raise ParameterError("images and z_offsets_um must have equal length")


# ---------------------------------------------------------------------------
# Phantom generation
# ---------------------------------------------------------------------------

def _smooth_field(rng: np.random.Generator, shape: tuple[int, int], sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="reflect")
    lo, hi = f.min(), f.max()
    if hi - lo < 1e-12:
        return np.zeros(shape, dtype=np.float64)
    return (f - lo) / (hi - lo)


def _paint_background(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    tint = _smooth_field(rng, shape, sigma=max(4.0, min(h, w) / 24)) - 0.5
    img = np.empty((h, w, 3), dtype=np.float32)
    img[:] = _BACKGROUND_MEAN
    img += (tint * 0.03).astype(np.float32)[..., None]
    return np.clip(img, _BACKGROUND_FLOOR, 1.0)


def _paint_tissue(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> None:
    """Fill masked pixels with stained-tissue texture, in place."""
    if not mask.any():
        return
    h, w = mask.shape
    blend = _smooth_field(rng, (h, w), sigma=max(6.0, min(h, w) / 20))
    stain = (blend[..., None] * _EOSIN + (1.0 - blend[..., None]) * _HEMATOXYLIN)
    img[mask] = stain[mask].astype(np.float32)

    # Nuclei-like ellipse agglomerates; density one per ~350 px of tissue.
    # Darkening is achromatic so fine-scale gradient energy stays balanced
    # across channels; the ellipses still read as darker stain.
    flat = np.flatnonzero(mask)
    n_ellipses = max(1, flat.size // 350)
    centers = rng.choice(flat, size=n_ellipses, replace=True)
    axes = rng.uniform(2.5, 7.0, size=(n_ellipses, 2))
    angles = rng.uniform(0.0, np.pi, size=n_ellipses)
    shade = rng.uniform(0.14, 0.30, size=n_ellipses).astype(np.float32)
    for c, (a, b), theta, s in zip(centers, axes, angles, shade):
        cy, cx = divmod(int(c), w)
        r = int(np.ceil(max(a, b)))
        y0, y1 = max(0, cy - r), min(h, cy + r + 1)
        x0, x1 = max(0, cx - r), min(w, cx + r + 1)
        yy, xx = np.mgrid[y0 - cy:y1 - cy, x0 - cx:x1 - cx]
        ct, st = np.cos(theta), np.sin(theta)
        inside = ((xx * ct + yy * st) / a) ** 2 + ((-xx * st + yy * ct) / b) ** 2 <= 1.0
        window = mask[y0:y1, x0:x1] & inside
        img[y0:y1, x0:x1][window] = np.clip(img[y0:y1, x0:x1][window] - s, 0.02, 1.0)

    # Soften painted edges, then add broadband achromatic speckle: the finest
    # scale then carries equal energy per channel, so per-channel sharpness
    # orderings reflect blur rather than stain color contrast.
    soft = np.stack([gaussian_filter(img[..., c], 0.8) for c in range(3)], axis=-1)
    img[mask] = soft[mask]
    speckle = rng.standard_normal((h, w)).astype(np.float32) * 0.08
    img[mask] = np.clip(img[mask] + speckle[mask][:, None], 0.02, 0.85)


def _focal_surface(
    rng: np.random.Generator,
    shape: tuple[int, int],
    amplitude_um: float,
    slope_limit_um_per_px: float,
) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    z = np.zeros((h, w), dtype=np.float64)
    for _ in range(3):
        fx = rng.uniform(0.4, 2.0)
        fy = rng.uniform(0.4, 2.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.4, 1.0)
        z += amp * np.sin(2.0 * np.pi * (fx * xx / w + fy * yy / h) + phase)
    z -= z.mean()
    peak = np.abs(z).max()
    if peak > 0 and amplitude_um > 0:
        z *= amplitude_um / peak
    elif amplitude_um == 0:
        z[:] = 0.0
    gy, gx = np.gradient(z)
    slope = float(np.hypot(gx, gy).max())
    if slope > slope_limit_um_per_px > 0:
        z *= slope_limit_um_per_px / slope
    z -= z.mean()
    return z.astype(np.float32)


def generate_slide(
    seed: int,
    size_px: tuple[int, int],
    tissue_fraction: float,
    focal_amplitude_um: float = 5.0,
    focal_slope_limit: float = 0.1,
    px_per_mm: float = 1000.0,
) -> VirtualSlide:
    """Generate a deterministic tissue phantom.

    Parameters
    ----------
    seed : RNG seed; identical seeds give bit-identical slides.
    size_px : (height, width), both >= 256.
    tissue_fraction : target fraction of tissue pixels, in [0, 1]; the
        realized fraction lands within +-0.1 of the target.
    focal_amplitude_um : peak of the optimal-focus surface around its mean.
    focal_slope_limit : max finite-difference slope of the surface, um/px.
    px_per_mm : pixel pitch used to derive the physical extent.
    """
    h, w = int(size_px[0]), int(size_px[1])
    if h < 256 or w < 256:
        raise ParameterError(f"size_px must be at least 256x256, got {h}x{w}")
    if not 0.0 <= tissue_fraction <= 1.0:
        raise ParameterError(f"tissue_fraction must be in [0, 1], got {tissue_fraction}")

    rng = np.random.default_rng(seed)
    if tissue_fraction <= 0.0:
        mask = np.zeros((h, w), dtype=bool)
    elif tissue_fraction >= 1.0:
        mask = np.ones((h, w), dtype=bool)
    else:
        blobs = gaussian_filter(rng.standard_normal((h, w)), sigma=min(h, w) / 16, mode="reflect")
        threshold = np.quantile(blobs, 1.0 - tissue_fraction)
        mask = blobs > threshold

    img = _paint_background(rng, (h, w))
    _paint_tissue(img, mask, rng)
    surface = _focal_surface(rng, (h, w), focal_amplitude_um, focal_slope_limit)
    return VirtualSlide(
        sharp_image=img,
        focal_surface=surface,
        tissue_mask=mask,
        physical_extent=(w / px_per_mm, h / px_per_mm),
    )


def generate_patterned_slide(
    seed: int,
    size_px: tuple[int, int],
    tissue_regions: list[Region],
    fill_fraction: float = 0.7,
    focal_amplitude_um: float = 5.0,
    focal_slope_limit: float = 0.1,
    px_per_mm: float = 1000.0,
) -> VirtualSlide:
    """Blank slide with tissue blobs confined to the given regions.

    Each region receives an organic blob occupying roughly ``fill_fraction``
    of its area; everything else stays near-white background. Used to build
    slides whose tissue placement is known cell by cell.
    """
    h, w = int(size_px[0]), int(size_px[1])
    if not 0.0 < fill_fraction <= 1.0:
        raise ParameterError("fill_fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    mask = np.zeros((h, w), dtype=bool)
    for region in tissue_regions:
        if region.row0 < 0 or region.col0 < 0 or region.row1 > h or region.col1 > w:
            raise RegionError(f"tissue region {region} outside slide of size {h}x{w}")
        local = gaussian_filter(
            rng.standard_normal((region.height, region.width)),
            sigma=max(2.0, min(region.height, region.width) / 6),
            mode="reflect",
        )
        threshold = np.quantile(local, 1.0 - fill_fraction)
        mask[region.row0:region.row1, region.col0:region.col1] |= local > threshold

    img = _paint_background(rng, (h, w))
    _paint_tissue(img, mask, rng)
    surface = _focal_surface(rng, (h, w), focal_amplitude_um, focal_slope_limit)
    return VirtualSlide(
        sharp_image=img,
        focal_surface=surface,
        tissue_mask=mask,
        physical_extent=(w / px_per_mm, h / px_per_mm),
    )


# ---------------------------------------------------------------------------
# Defocus rendering
# ---------------------------------------------------------------------------

def noise_rng(optics: OpticsConfig, z_um: float, noise_key: tuple) -> np.random.Generator:
    z_bits = int(np.float64(z_um).view(np.uint64))
    entropy = [int(optics.seed) & 0xFFFFFFFF, z_bits & 0xFFFFFFFF, z_bits >> 32]
    entropy.extend(int(k) & 0xFFFFFFFF for k in noise_key)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _blur_channel(channel: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0.0:
        return channel.copy()
    return gaussian_filter(channel, sigma=float(sigma), mode="reflect", truncate=4.0)


def _blur_channel_varying(channel: np.ndarray, sigma_map: np.ndarray) -> np.ndarray:
    """Spatially varying Gaussian blur via a ladder of uniform blurs.

    The sigma field is sampled at a small set of levels; each pixel blends
    the two nearest uniformly blurred copies. Exact when the field is flat.
    """
    smin = float(sigma_map.min())
    smax = float(sigma_map.max())
    if smax - smin < 1e-9:
        return _blur_channel(channel, smin)
    n_levels = int(np.ceil((smax - smin) / _SIGMA_LADDER_STEP_PX)) + 1
    n_levels = min(max(n_levels, 2), _SIGMA_LADDER_MAX_LEVELS)
    levels = np.linspace(smin, smax, n_levels)
    blurred = np.stack([_blur_channel(channel, s) for s in levels])
    idx = np.clip(np.searchsorted(levels, sigma_map, side="right") - 1, 0, n_levels - 2)
    lo = levels[idx]
    hi = levels[idx + 1]
    frac = np.where(hi > lo, (sigma_map - lo) / np.maximum(hi - lo, 1e-12), 0.0)
    rows, cols = np.indices(channel.shape)
    out = blurred[idx, rows, cols] * (1.0 - frac) + blurred[idx + 1, rows, cols] * frac
    return out


def _render_defocus(
    image: np.ndarray,
    surface: np.ndarray,
    z_um: float,
    optics: OpticsConfig,
    noise_key: tuple = (),
    add_noise: bool = True,
) -> np.ndarray:
    out = np.empty_like(image, dtype=np.float32)
    flat = float(surface.max() - surface.min()) < 1e-9
    for c, delta in enumerate(optics.channel_offsets_um):
        channel = image[..., c].astype(np.float64)
        if flat:
            sigma = optics.blur_gain_k * abs(z_um + delta - float(surface.flat[0]))
            out[..., c] = _blur_channel(channel, sigma)
        else:
            sigma_map = optics.blur_gain_k * np.abs(z_um + delta - surface.astype(np.float64))
            out[..., c] = _blur_channel_varying(channel, sigma_map)
    if add_noise and optics.noise_sigma > 0:
        rng = noise_rng(optics, z_um, noise_key)
        out += rng.normal(0.0, optics.noise_sigma, size=out.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0)


def apply_defocus(slide: VirtualSlide, z_um: float, optics: OpticsConfig) -> np.ndarray:
    """Render the whole slide as seen with the stage at offset ``z_um``.

    ``z_um`` is measured from the slide's mean optimal plane. Each channel c
    is blurred with an isotropic Gaussian of
    ``sigma_c = blur_gain_k * |z_um + delta_c - z*(x, y)|`` pixels, then
    sensor noise is added and the result clipped to [0, 1]. With a flat
    focal surface, zero chroma offset, and zero noise, the render at the
    focal plane reproduces the sharp image exactly.
    """
    if not np.isfinite(z_um):
        raise ParameterError(f"z_um must be finite, got {z_um}")
    return _render_defocus(slide.sharp_image, slide.focal_surface, float(z_um), optics)


def render_region(
    slide: VirtualSlide,
    region: Region,
    stage_z_um: float,
    optics: OpticsConfig,
    noise_key: tuple = (),
    add_noise: bool = True,
) -> np.ndarray:
    """Render one field of view at an absolute stage z, with blur margins.

    The crop is padded by the blur support before filtering so tile edges
    match what a whole-slide render would produce, then trimmed back.
    """
    slide.check_region(region)
    h, w = slide.size_px
    sigma_max = optics.blur_gain_k * (
        abs(stage_z_um) + optics.chroma_offset_um + float(np.abs(slide.focal_surface).max())
    )
    margin = int(np.ceil(4.0 * sigma_max)) + 1
    r0 = max(0, region.row0 - margin)
    c0 = max(0, region.col0 - margin)
    r1 = min(h, region.row1 + margin)
    c1 = min(w, region.col1 + margin)
    img = slide.sharp_image[r0:r1, c0:c1]
    srf = slide.focal_surface[r0:r1, c0:c1]
    rendered = _render_defocus(img, srf, float(stage_z_um), optics, noise_key=noise_key, add_noise=False)
    view = rendered[region.row0 - r0:region.row1 - r0, region.col0 - c0:region.col1 - c0]
    if add_noise and optics.noise_sigma > 0:
        rng = noise_rng(optics, float(stage_z_um), noise_key)
        view = view + rng.normal(0.0, optics.noise_sigma, size=view.shape).astype(np.float32)
    return np.clip(view, 0.0, 1.0)


def synthesize_stack(
    slide: VirtualSlide,
    fov: Region,
    n_slices: int,
    z_range_um: float,
    optics: OpticsConfig,
    slide_id: str = "",
    fov_id: str = "",
) -> FocalStack:
    """Render a focal stack of one field of view.

    Offsets are uniformly spaced in [-z_range_um, +z_range_um] and measured
    from the field's own mean optimal plane; an even slice count therefore
    puts exactly half the slices below and half above the plane.
    """
    if n_slices < 3:
        raise ParameterError(f"n_slices must be >= 3, got {n_slices}")
    if z_range_um <= 0:
        raise ParameterError(f"z_range_um must be > 0, got {z_range_um}")
    slide.check_region(fov)
    focal_mean = slide.mean_focal_um(fov)
    offsets = np.linspace(-z_range_um, z_range_um, n_slices)
    images = []
    for i, dz in enumerate(offsets):
        stage_z = focal_mean + float(dz)
        images.append(
            render_region(slide, fov, stage_z, optics, noise_key=(fov.row0, fov.col0, i))
        )
    return FocalStack(
        images=images,
        z_offsets_um=[float(v) for v in offsets],
        optics=optics,
        slide_id=slide_id,
        fov_id=fov_id,
        region=fov,
    )


# ---------------------------------------------------------------------------
# Focus oracles
# ---------------------------------------------------------------------------

def _to_gray(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    if arr.ndim != 2:
        raise ParameterError(f"expected a 2-D or 3-D image, got ndim={arr.ndim}")
    return arr


def brenner_score(image: np.ndarray) -> float:
    """Brenner gradient sharpness: sum of squared 2-px horizontal differences.

    Larger is sharper; exactly zero for a constant image.
    """
    gray = _to_gray(image)
    if gray.shape[1] < 3:
        raise ParameterError(f"image must be at least 3 px wide, got width {gray.shape[1]}")
    diff = gray[:, 2:] - gray[:, :-2]
    return float(np.square(diff).sum())


def power_spectrum_2d(image: np.ndarray) -> np.ndarray:
    """Centered 2-D power spectrum, normalized so total power equals image energy."""
    gray = _to_gray(image)
    side = min(gray.shape)
    r0 = (gray.shape[0] - side) // 2
    c0 = (gray.shape[1] - side) // 2
    gray = gray[r0:r0 + side, c0:c0 + side]
    spectrum = np.fft.fftshift(np.fft.fft2(gray))
    return np.square(np.abs(spectrum)) / gray.size


def radial_power_spectrum(image: np.ndarray) -> np.ndarray:
    """Radially averaged power spectrum.

    Returns one value per integer radius from 0 (the DC bin) to the Nyquist
    radius of the center-cropped square image.
    """
    power = power_spectrum_2d(image)
    side = power.shape[0]
    cy, cx = side // 2, side // 2
    yy, xx = np.indices(power.shape)
    radius = np.rint(np.hypot(xx - cx, yy - cy)).astype(int)
    nyquist = side // 2
    profile = np.zeros(nyquist + 1, dtype=np.float64)
    for r in range(nyquist + 1):
        sel = radius == r
        profile[r] = power[sel].mean() if sel.any() else 0.0
    return profile


def estimate_cutoff_frequency(image: np.ndarray, floor_ratio: float = 0.01) -> float:
    """Normalized cut-off frequency of an image's radial power spectrum.

    Returns the largest radius (normalized to [0, 1] by the Nyquist radius)
    whose power is at least ``floor_ratio`` times the first non-DC bin.
    Cut-off is monotone non-increasing in blur for fixed content.
    """
    if not 0.0 < floor_ratio < 1.0:
        raise ParameterError(f"floor_ratio must be in (0, 1), got {floor_ratio}")
    profile = radial_power_spectrum(image)
    if profile.size < 2:
        raise SpectrumUndefinedError("image too small for a radial spectrum")
    reference = profile[1]
    if not np.isfinite(reference) or reference <= 0.0:
        raise SpectrumUndefinedError("no non-DC energy; cut-off frequency undefined")
    threshold = floor_ratio * reference
    above = np.flatnonzero(profile[1:] >= threshold) + 1
    nyquist = profile.size - 1
    return float(above.max()) / float(nyquist)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def image_to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(image: np.ndarray, path: Path | str) -> None:
    Image.fromarray(image_to_u8(image), mode="RGB").save(str(path), format="PNG")


def load_png(path: Path | str) -> np.ndarray:
    with Image.open(str(path)) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_slide(slide: VirtualSlide, out_dir: Path | str) -> None:
    """Persist a slide: sharp PNG, float32 focal surface, mask, metadata."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_png(slide.sharp_image, out / "sharp.png")
    np.save(out / "focal_surface.npy", slide.focal_surface.astype(np.float32))
    np.save(out / "tissue_mask.npy", slide.tissue_mask)
    meta = {"physical_extent_mm": list(slide.physical_extent), "size_px": list(slide.size_px)}
    (out / "slide.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def save_stack(stack: FocalStack, out_dir: Path | str) -> list[str]:
    """Persist a stack as 8-bit PNG slices plus a sidecar JSON.

    Returns the slice paths (relative to ``out_dir``'s parent) and records
    them on the stack for manifest construction.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(stack.images):
        name = f"slice_{i:04d}.png"
        save_png(img, out / name)
        paths.append(name)
    sidecar = {
        "optics": stack.optics.to_dict(),
        "z_offsets_um": stack.z_offsets_um,
        "slide_id": stack.slide_id,
        "fov_id": stack.fov_id,
        "region": list(stack.region.as_tuple()) if stack.region else None,
        "slices": paths,
    }
    (out / "stack.json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    stack.slice_paths = [str(Path(out.name) / p) for p in paths]
    return paths


def load_stack(stack_dir: Path | str) -> FocalStack:
    stack_dir = Path(stack_dir)
    sidecar = json.loads((stack_dir / "stack.json").read_text())
    images = [load_png(stack_dir / name) for name in sidecar["slices"]]
    region = Region(*sidecar["region"]) if sidecar.get("region") else None
    stack = FocalStack(
        images=images,
        z_offsets_um=[float(v) for v in sidecar["z_offsets_um"]],
        optics=OpticsConfig(**sidecar["optics"]),
        slide_id=sidecar.get("slide_id", ""),
        fov_id=sidecar.get("fov_id", ""),
        region=region,
    )
    stack.slice_paths = [str(Path(stack_dir.name) / p) for p in sidecar["slices"]]
    return stack
