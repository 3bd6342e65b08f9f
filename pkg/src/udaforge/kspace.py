"""Centered 2-D FFT and the four k-space degradations.

Conventions, fixed across the package:
  - k-space grids are complex (H, W) arrays with the DC bin at
    (H//2, W//2); fft2_centered / ifft2_centered are exact inverses.
  - rows are the phase-encode direction; every row-wise corruption acts
    along axis 0.
  - degraded images come back as the real part, clamped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_ARTIFACT_FREE = 0
CLASS_CARDIAC = 1
CLASS_RESPIRATORY = 2
CLASS_GIBBS = 3
CLASS_ALIASING = 4

CLASS_NAMES = (
    "artifact_free",
    "cardiac_motion",
    "respiratory_motion",
    "gibbs",
    "aliasing",
)

# sampling ranges for randomized severity; floors sit at the visibility
# threshold for 32x32 phantoms so every class keeps a learnable signature
GIBBS_KEEP_RANGE = (0.12, 0.30)
ALIAS_FACTORS = (2, 3, 4)
ALIAS_CENTER_KEEP = (0, 4, 8)
RESP_AMPLITUDE_RANGE = (3.0, 7.0)
RESP_CYCLES_RANGE = (2.0, 8.0)
CARDIAC_DEFORM_RANGE = (0.20, 0.40)
CARDIAC_LINE_RANGE = (0.35, 0.70)


def _check_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    if img.shape[0] < 4 or img.shape[1] < 4:
        raise ValueError(f"image too small: {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    return img


def fft2_centered(img):
    """Image -> centered k-space (DC at (H//2, W//2))."""
    img = _check_image(img)
    return np.fft.fftshift(np.fft.fft2(img))


def ifft2_centered(k):
    """Centered k-space -> real-part image."""
    k = np.asarray(k, dtype=np.complex128)
    if k.ndim != 2 or k.shape[0] < 4 or k.shape[1] < 4:
        raise ValueError(f"bad k-space shape: {k.shape}")
    if not np.isfinite(k.real).all() or not np.isfinite(k.imag).all():
        raise ValueError("k-space contains non-finite values")
    return np.fft.ifft2(np.fft.ifftshift(k)).real


def _clamp(img):
    return np.clip(img, 0.0, 1.0)


def _kept_band(n, count):
    """Indices of `count` rows centered on the DC row n//2."""
    start = n // 2 - count // 2
    return np.arange(start, start + count)


def gibbs_truncate(img, keep_fraction):
    """Ideal rectangular low-pass: keep only the central band of k-space."""
    img = _check_image(img)
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    h, w = img.shape
    keep_h = max(1, int(round(keep_fraction * h)))
    keep_w = max(1, int(round(keep_fraction * w)))
    mask = np.zeros((h, w))
    rows = _kept_band(h, keep_h)
    cols = _kept_band(w, keep_w)
    mask[np.ix_(rows, cols)] = 1.0
    return _clamp(ifft2_centered(fft2_centered(img) * mask))


def alias_subsample(img, factor, center_keep=0):
    """Undersample phase-encode rows by `factor`, keeping a fully sampled
    center band of `center_keep` rows.

    Comb rows are scaled by `factor` so the replica superposition carries
    full amplitude; center-band rows stay unscaled (they are fully
    sampled), which also keeps the mean brightness when the band covers DC.
    """
    img = _check_image(img)
    factor = int(factor)
    center_keep = int(center_keep)
    h = img.shape[0]
    # factor 1 is the degenerate comb: every row kept, unscaled -> identity
    if factor < 1:
        raise ValueError(f"subsampling factor must be >= 1, got {factor}")
    if h % factor != 0:
        raise ValueError(f"image height {h} not divisible by factor {factor}")
    if center_keep < 0 or center_keep % 2 != 0:
        raise ValueError(f"center_keep must be an even integer >= 0, got {center_keep}")
    if center_keep >= h:
        raise ValueError(f"center_keep {center_keep} must be smaller than height {h}")
    rows = np.arange(h)
    weights = np.where((rows - h // 2) % factor == 0, float(factor), 0.0)
    if center_keep:
        weights[_kept_band(h, center_keep)] = 1.0
    k = fft2_centered(img) * weights[:, None]
    return _clamp(ifft2_centered(k))


def respiratory_motion(img, amplitude_px, cycles, phase0=0.0):
    """Sinusoidal vertical translation during row-by-row acquisition.

    Row r is acquired at t = r/H from an object shifted by
    d(t) = amplitude * sin(2*pi*cycles*t + phase0); the shift enters as a
    linear phase ramp on that row.
    """
    img = _check_image(img)
    if amplitude_px < 0:
        raise ValueError(f"amplitude must be >= 0, got {amplitude_px}")
    h, w = img.shape
    k = fft2_centered(img)
    r = np.arange(h)
    t = r / h
    d = amplitude_px * np.sin(2.0 * np.pi * cycles * t + phase0)
    freq = r - h // 2
    phase = np.exp(-2j * np.pi * freq * d / h)
    return _clamp(ifft2_centered(k * phase[:, None]))


def radial_deform(img, strength, radius_scale=0.35):
    """Magnify the central region by (1 + strength) with a smooth Gaussian
    falloff; bilinear resampling with clamped edges. strength=0 is exact
    identity."""
    img = _check_image(img)
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    rho2 = dy * dy + dx * dx
    r0 = radius_scale * min(h, w)
    bump = np.exp(-rho2 / (r0 * r0))
    scale = 1.0 + strength * bump
    sy = cy + dy / scale
    sx = cx + dx / scale
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = sy - y0
    fx = sx - x0
    return (
        img[y0, x0] * (1 - fy) * (1 - fx)
        + img[y1, x0] * fy * (1 - fx)
        + img[y0, x1] * (1 - fy) * fx
        + img[y1, x1] * fy * fx
    )


def cardiac_motion(img, deform_strength, line_fraction, seed=0):
    """Replace a center-biased subset of k-space rows with rows from a
    radially deformed copy (the stand-in for a different motion state)."""
    img = _check_image(img)
    if not 0.0 <= line_fraction <= 1.0:
        raise ValueError(f"line_fraction must be in [0, 1], got {line_fraction}")
    h = img.shape[0]
    n = int(np.floor(line_fraction * h))
    if n == 0 or deform_strength == 0.0:
        return _clamp(img.copy())
    deformed = radial_deform(img, deform_strength)
    if n >= h:
        return _clamp(deformed)
    rng = np.random.default_rng(seed)
    rows = np.arange(h)
    weights = np.exp(-(((rows - h // 2) / (h / 4.0)) ** 2))
    weights /= weights.sum()
    chosen = rng.choice(h, size=n, replace=False, p=weights)
    k = fft2_centered(img)
    k_def = fft2_centered(deformed)
    k[chosen, :] = k_def[chosen, :]
    return _clamp(ifft2_centered(k))


@dataclass(frozen=True)
class SeverityParams:
    """Class id plus the class-specific degradation parameters."""

    class_id: int
    params: dict

    def __post_init__(self):
        if self.class_id not in range(5):
            raise ValueError(f"unknown class id {self.class_id}")


def sample_severity(rng, class_id, image_hw=None):
    """Draw degradation parameters uniformly from the per-class ranges.

    image_hw, when given, restricts aliasing factors to divisors of the
    height so the draw is always applicable.
    """
    if class_id == CLASS_ARTIFACT_FREE:
        return SeverityParams(class_id, {})
    if class_id == CLASS_CARDIAC:
        return SeverityParams(
            class_id,
            {
                "deform_strength": rng.uniform(*CARDIAC_DEFORM_RANGE),
                "line_fraction": rng.uniform(*CARDIAC_LINE_RANGE),
                "seed": int(rng.integers(0, 2**31 - 1)),
            },
        )
    if class_id == CLASS_RESPIRATORY:
        return SeverityParams(
            class_id,
            {
                "amplitude_px": rng.uniform(*RESP_AMPLITUDE_RANGE),
                "cycles": rng.uniform(*RESP_CYCLES_RANGE),
                "phase0": rng.uniform(0.0, 2.0 * np.pi),
            },
        )
    if class_id == CLASS_GIBBS:
        return SeverityParams(
            class_id, {"keep_fraction": rng.uniform(*GIBBS_KEEP_RANGE)}
        )
    if class_id == CLASS_ALIASING:
        factors = ALIAS_FACTORS
        if image_hw is not None:
            factors = tuple(f for f in ALIAS_FACTORS if image_hw[0] % f == 0)
            if not factors:
                raise ValueError(f"no valid aliasing factor for height {image_hw[0]}")
        ck = tuple(c for c in ALIAS_CENTER_KEEP if image_hw is None or c < image_hw[0])
        return SeverityParams(
            class_id,
            {
                "factor": int(factors[rng.integers(len(factors))]),
                "center_keep": int(ck[rng.integers(len(ck))]),
            },
        )
    raise ValueError(f"unknown class id {class_id}")


def apply_artifact(img, severity):
    """Dispatch a SeverityParams onto its degradation; class 0 is a no-op
    up to the output clamp."""
    p = severity.params
    if severity.class_id == CLASS_ARTIFACT_FREE:
        return _clamp(_check_image(img).copy())
    if severity.class_id == CLASS_CARDIAC:
        return cardiac_motion(
            img, p["deform_strength"], p["line_fraction"], seed=p["seed"]
        )
    if severity.class_id == CLASS_RESPIRATORY:
        return respiratory_motion(img, p["amplitude_px"], p["cycles"], p["phase0"])
    if severity.class_id == CLASS_GIBBS:
        return gibbs_truncate(img, p["keep_fraction"])
    if severity.class_id == CLASS_ALIASING:
        return alias_subsample(img, p["factor"], p["center_keep"])
    raise ValueError(f"unknown class id {severity.class_id}")
