"""Linear mixing model: domain types, forward synthesis, abundance constraints.

Per pixel the observation is y = A x + n, where A stacks one pure spectral
signature per column, x holds the endmember fractions, and n is zero-mean
Gaussian sensor noise that is independent across bands.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _float_array(values, name: str, ndim: int) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class EndmemberMatrix:
    """Pure spectral signatures, one column per endmember (bands x endmembers)."""

    values: np.ndarray

    def __post_init__(self):
        values = _float_array(self.values, "endmember matrix", 2)
        object.__setattr__(self, "values", values)
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError("endmember matrix needs at least one band and one endmember")
        if not np.all(np.isfinite(values)):
            raise ValueError("endmember matrix entries must be finite")
        if np.any(values < 0):
            raise ValueError("endmember matrix entries must be non-negative")
        if not np.all(values.any(axis=0)):
            raise ValueError("endmember matrix must not contain an all-zero signature")

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def endmembers(self) -> int:
        return self.values.shape[1]

    def select_bands(self, band_mask) -> "EndmemberMatrix":
        """Restrict the signatures to the bands flagged True in ``band_mask``."""
        mask = np.asarray(band_mask, dtype=bool)
        if mask.shape != (self.bands,):
            raise ValueError(f"band mask must have shape ({self.bands},), got {mask.shape}")
        return EndmemberMatrix(self.values[mask, :])


@dataclass(frozen=True)
class AbundanceVector:
    """Per-pixel endmember fractions.

    Construction only requires finite entries; the nonnegativity and
    sum-to-one constraints are checked by :func:`validate_abundance` and
    enforced by :func:`project_to_constraints`.
    """

    fractions: np.ndarray

    def __post_init__(self):
        fractions = _float_array(self.fractions, "abundance vector", 1)
        object.__setattr__(self, "fractions", fractions)
        if fractions.size < 1:
            raise ValueError("abundance vector must not be empty")
        if not np.all(np.isfinite(fractions)):
            raise ValueError("abundance vector entries must be finite")

    def __len__(self) -> int:
        return self.fractions.size


@dataclass(frozen=True)
class PixelSpectrum:
    """Measured reflectance of one pixel, one entry per spectral band."""

    values: np.ndarray

    def __post_init__(self):
        values = _float_array(self.values, "pixel spectrum", 1)
        object.__setattr__(self, "values", values)
        if values.size < 1:
            raise ValueError("pixel spectrum must not be empty")
        if not np.all(np.isfinite(values)):
            raise ValueError("pixel spectrum entries must be finite")

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class HyperspectralCube:
    """Height x width x bands reflectance stack with a retained-band mask."""

    data: np.ndarray
    band_mask: np.ndarray | None = None

    def __post_init__(self):
        data = _float_array(self.data, "cube data", 3)
        object.__setattr__(self, "data", data)
        if min(data.shape) < 1:
            raise ValueError(f"cube dimensions must all be positive, got {data.shape}")
        mask = self.band_mask
        if mask is None:
            mask = np.ones(data.shape[2], dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (data.shape[2],):
                raise ValueError(
                    f"band mask must have shape ({data.shape[2]},), got {mask.shape}"
                )
        object.__setattr__(self, "band_mask", mask)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @property
    def effective_bands(self) -> int:
        return int(np.count_nonzero(self.band_mask))

    def masked_data(self) -> np.ndarray:
        """Cube restricted to retained bands, shape (height, width, effective_bands)."""
        return self.data[:, :, self.band_mask]


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean Gaussian band noise with variance sigma^2 (reflectance^2)."""

    variance: float

    def __post_init__(self):
        variance = float(self.variance)
        object.__setattr__(self, "variance", variance)
        if not np.isfinite(variance) or variance <= 0:
            raise ValueError(f"noise variance must be positive and finite, got {variance}")


@dataclass(frozen=True)
class ConstraintViolation:
    constraint: str
    magnitude: float


@dataclass(frozen=True)
class AbundanceReport:
    """Result of constraint validation; empty means all checks passed."""

    violations: tuple[ConstraintViolation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def forward_mix(
    A: EndmemberMatrix,
    x: AbundanceVector,
    noise: NoiseModel | None = None,
    seed: int | None = None,
) -> PixelSpectrum:
    """Synthesize one pixel spectrum y = A x (+ n).

    Parameters
    ----------
    A : EndmemberMatrix
        Signatures, shape (bands, endmembers).
    x : AbundanceVector
        Fractions, length must equal ``A.endmembers``.
    noise : NoiseModel, optional
        When given, i.i.d. Gaussian(0, variance) noise is added per band.
        ``None`` means exact synthesis.
    seed : int, optional
        Seed for the noise draw; a fixed seed gives a reproducible spectrum.
    """
    if len(x) != A.endmembers:
        raise ValueError(
            f"abundance length {len(x)} does not match endmember count {A.endmembers}"
        )
    y = A.values @ x.fractions
    if noise is not None:
        rng = np.random.default_rng(seed)
        y = y + rng.normal(0.0, np.sqrt(noise.variance), size=A.bands)
    return PixelSpectrum(y)


def validate_abundance(
    x: AbundanceVector,
    enforce_asc: bool = False,
    tolerance: float = 1e-9,
) -> AbundanceReport:
    """Check the nonnegativity (and optionally sum-to-one) constraints.

    Never raises: every violated constraint is reported with its magnitude.
    """
    fractions = x.fractions
    violations = []
    worst_negative = float(np.min(fractions, initial=0.0))
    if worst_negative < 0:
        violations.append(ConstraintViolation("nonnegativity", -worst_negative))
    if enforce_asc:
        gap = abs(float(np.sum(fractions)) - 1.0)
        if gap > tolerance:
            violations.append(ConstraintViolation("sum-to-one", gap))
    return AbundanceReport(tuple(violations))


def project_to_constraints(x_raw, enforce_asc: bool = False) -> AbundanceVector:
    """Clip negatives to zero; optionally rescale onto the unit simplex.

    With ``enforce_asc`` and an all-nonpositive input there is nothing to
    rescale, so the equal mixture 1/q is returned. Idempotent.
    """
    raw = _float_array(x_raw, "raw abundance", 1)
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw abundance entries must be finite")
    clipped = np.maximum(raw, 0.0)
    if enforce_asc:
        total = float(clipped.sum())
        if total > 0.0:
            clipped = clipped / total
        else:
            clipped = np.full(raw.size, 1.0 / raw.size)
    return AbundanceVector(clipped)


def project_map(raw_map: np.ndarray, enforce_asc: bool = False) -> np.ndarray:
    """Apply :func:`project_to_constraints` to every pixel of an (H, W, q) stack."""
    raw = _float_array(raw_map, "raw abundance map", 3)
    clipped = np.maximum(raw, 0.0)
    if enforce_asc:
        totals = clipped.sum(axis=2, keepdims=True)
        q = raw.shape[2]
        uniform = np.full_like(clipped, 1.0 / q)
        with np.errstate(invalid="ignore", divide="ignore"):
            scaled = clipped / totals
        clipped = np.where(totals > 0.0, scaled, uniform)
    return clipped


def mix_map(A: EndmemberMatrix, abundance_map: np.ndarray) -> np.ndarray:
    """Forward-mix every pixel of an (H, W, q) abundance stack, no noise.

    Returns the clean (H, W, bands) cube data.
    """
    ab = _float_array(abundance_map, "abundance map", 3)
    if ab.shape[2] != A.endmembers:
        raise ValueError(
            f"abundance map has {ab.shape[2]} channels, expected {A.endmembers}"
        )
    return ab @ A.values.T
