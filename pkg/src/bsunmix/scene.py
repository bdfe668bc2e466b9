"""Synthetic hyperspectral scenes: block-pure image, low-pass mixing,
pure-pixel removal, calibrated Gaussian noise.

The generated ground truth satisfies the nonnegativity constraint exactly and
sums to one per pixel up to accumulated rounding (averaging simplex points
stays on the simplex).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import convolve2d

from .errors import DataFormatError
from .mixing import EndmemberMatrix, HyperspectralCube, mix_map
from . import sceneio

# Seed of the bundled signature library; fixed so scenes are reproducible.
LIBRARY_SEED = 1815

_SCENE_FILES = {
    "cube": "cube.f64",
    "cube_header": "cube.hdr",
    "truth": "truth.f64",
    "truth_header": "truth.hdr",
    "endmembers": "endmembers.csv",
    "provenance": "provenance.txt",
}


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the synthetic-scene protocol."""

    height: int = 50
    width: int = 50
    block_size: int = 5
    num_endmembers: int = 12
    filter_size: int = 5
    purity_threshold: float = 0.8
    snr_db: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("scene dimensions must be positive")
        if self.block_size < 1 or self.height % self.block_size or self.width % self.block_size:
            raise ValueError(
                f"scene {self.height}x{self.width} is not a multiple of "
                f"block size {self.block_size}"
            )
        if self.num_endmembers < 1:
            raise ValueError("need at least one endmember")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ValueError(f"filter size must be odd, got {self.filter_size}")
        if self.filter_size > min(self.height, self.width):
            raise ValueError("filter size exceeds scene dimensions")
        # threshold 1.0 is the sentinel for "no replacement"
        if not 0.0 < self.purity_threshold <= 1.0:
            raise ValueError(
                f"purity threshold must be in (0, 1], got {self.purity_threshold}"
            )


@dataclass(frozen=True)
class SyntheticScene:
    """A generated scene: noisy cube, exact ground truth, applied noise level."""

    cube: HyperspectralCube
    ground_truth: np.ndarray
    endmembers: EndmemberMatrix
    applied_sigma2: float


def synthetic_library(
    num_signatures: int = 24,
    bands: int = 224,
    seed: int = LIBRARY_SEED,
) -> EndmemberMatrix:
    """Deterministic stand-in spectral library of smooth reflectance curves.

    Each signature is a baseline plus a handful of broad Gaussian bumps,
    clipped to (0, 1); widths are broad relative to the band axis so that
    signatures overlap the way smooth laboratory reflectance spectra do.
    """
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, bands)
    columns = np.empty((bands, num_signatures))
    for j in range(num_signatures):
        spectrum = np.full(bands, rng.uniform(0.15, 0.55))
        for _ in range(int(rng.integers(3, 8))):
            center = rng.uniform(0.0, 1.0)
            width = rng.uniform(0.08, 0.3)
            amplitude = rng.uniform(-0.35, 0.5)
            spectrum += amplitude * np.exp(-0.5 * ((grid - center) / width) ** 2)
        columns[:, j] = np.clip(spectrum, 0.02, 0.98)
    return EndmemberMatrix(columns)


def select_endmembers(library: EndmemberMatrix, select: int, seed: int | None) -> EndmemberMatrix:
    """Pick ``select`` distinct signatures, order permuted per seed."""
    if select < 1 or select > library.endmembers:
        raise DataFormatError(
            f"cannot select {select} signatures from a library of {library.endmembers}"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(library.endmembers)[:select]
    return EndmemberMatrix(library.values[:, chosen])


def load_spectral_library(path: str, select: int, seed: int | None = None) -> EndmemberMatrix:
    """Load a CSV library (one column per signature) and select ``select`` columns."""
    return select_endmembers(sceneio.load_endmembers(path), select, seed)


def generate_block_abundances(spec: SceneSpec, seed: int | None = None) -> np.ndarray:
    """One-hot abundance map where each block is a single random endmember."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    hb = spec.height // spec.block_size
    wb = spec.width // spec.block_size
    block_choice = rng.integers(0, spec.num_endmembers, size=(hb, wb))
    pixel_choice = np.repeat(np.repeat(block_choice, spec.block_size, axis=0),
                             spec.block_size, axis=1)
    return np.eye(spec.num_endmembers)[pixel_choice]


def lowpass_mix(abundance_map: np.ndarray, filter_size: int, periodic: bool = False) -> np.ndarray:
    """Average each abundance channel over a uniform k x k window.

    Boundaries replicate the edge pixel by default; the periodic option wraps
    instead (useful for exact channel-mean conservation checks).
    """
    ab = np.asarray(abundance_map, dtype=np.float64)
    if ab.ndim != 3:
        raise ValueError(f"abundance map must be 3-D, got shape {ab.shape}")
    k = int(filter_size)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"filter size must be odd, got {k}")
    if k > min(ab.shape[0], ab.shape[1]):
        raise ValueError("filter size exceeds map dimensions")
    if k == 1:
        return ab.copy()
    pad = k // 2
    kernel = np.full((k, k), 1.0 / (k * k))
    mode = "wrap" if periodic else "edge"
    out = np.empty_like(ab)
    for channel in range(ab.shape[2]):
        padded = np.pad(ab[:, :, channel], pad, mode=mode)
        out[:, :, channel] = convolve2d(padded, kernel, mode="valid")
    return out


def remove_pure_pixels(abundance_map: np.ndarray, threshold: float) -> np.ndarray:
    """Replace pixels whose largest fraction exceeds ``threshold`` (strictly)
    with the equal mixture 1/q."""
    ab = np.asarray(abundance_map, dtype=np.float64)
    q = ab.shape[2]
    out = ab.copy()
    out[ab.max(axis=2) > threshold] = 1.0 / q
    return out


def inject_noise_at_snr(
    clean_cube: HyperspectralCube,
    snr_db: float,
    seed: int | None = None,
) -> tuple[HyperspectralCube, float]:
    """Add i.i.d. Gaussian band noise at a requested SNR.

    The variance is chosen so that 10*log10(mean per-pixel signal energy /
    mean per-pixel noise energy) equals ``snr_db``, with the signal energy
    measured empirically over the scene. ``math.inf`` means no noise.
    """
    data = clean_cube.data
    if math.isinf(snr_db) and snr_db > 0:
        return HyperspectralCube(data.copy(), clean_cube.band_mask), 0.0
    mean_energy = float(np.einsum("hwl,hwl->", data, data)) / (data.shape[0] * data.shape[1])
    if mean_energy <= 0.0:
        raise ValueError("cannot set an SNR on an all-zero cube")
    sigma2 = mean_energy / (data.shape[2] * 10.0 ** (snr_db / 10.0))
    rng = np.random.default_rng(seed)
    noisy = data + rng.standard_normal(data.shape) * math.sqrt(sigma2)
    return HyperspectralCube(noisy, clean_cube.band_mask), sigma2


def build_scene(
    spec: SceneSpec,
    library_path: str | None = None,
    library: EndmemberMatrix | None = None,
) -> SyntheticScene:
    """Run the full synthesis pipeline.

    Signatures come from ``library``/``library_path`` when given and from the
    bundled deterministic library otherwise. The scene seed drives three
    independent streams (signature selection, block assignment, noise) so a
    fixed seed reproduces the scene bit for bit.
    """
    select_seed, block_seed, noise_seed = np.random.SeedSequence(spec.seed).spawn(3)
    if library is None:
        library = (
            sceneio.load_endmembers(library_path)
            if library_path is not None
            else synthetic_library()
        )
    A = select_endmembers(library, spec.num_endmembers, select_seed)
    truth = generate_block_abundances(spec, block_seed)
    truth = lowpass_mix(truth, spec.filter_size)
    truth = remove_pure_pixels(truth, spec.purity_threshold)
    clean = HyperspectralCube(mix_map(A, truth))
    cube, sigma2 = inject_noise_at_snr(clean, spec.snr_db, noise_seed)
    return SyntheticScene(cube, truth, A, sigma2)


def save_scene(
    scene: SyntheticScene,
    spec: SceneSpec,
    out_dir: str,
    library_label: str = "bundled",
) -> None:
    """Write the scene bundle: cube, ground truth, endmembers, provenance."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {key: os.path.join(out_dir, name) for key, name in _SCENE_FILES.items()}
    sceneio.write_cube(scene.cube, paths["cube"], paths["cube_header"])
    sceneio.write_stack(scene.ground_truth, paths["truth"], paths["truth_header"])
    sceneio.save_endmembers(scene.endmembers, paths["endmembers"])
    sceneio.write_provenance(
        paths["provenance"],
        {
            "seed": spec.seed,
            "height": spec.height,
            "width": spec.width,
            "block_size": spec.block_size,
            "num_endmembers": spec.num_endmembers,
            "filter_size": spec.filter_size,
            "purity_threshold": repr(spec.purity_threshold),
            "snr_db": repr(spec.snr_db),
            "sigma2": repr(scene.applied_sigma2),
            "library": library_label,
        },
    )


def load_scene(scene_dir: str) -> tuple[SyntheticScene, dict[str, str]]:
    """Read a scene bundle written by :func:`save_scene`."""
    paths = {key: os.path.join(scene_dir, name) for key, name in _SCENE_FILES.items()}
    cube = sceneio.read_cube(paths["cube"], paths["cube_header"])
    truth = sceneio.read_stack(paths["truth"], paths["truth_header"])
    endmembers = sceneio.load_endmembers(paths["endmembers"])
    provenance = sceneio.read_provenance(paths["provenance"])
    if truth.shape[:2] != (cube.height, cube.width):
        raise DataFormatError(
            f"{scene_dir}: ground truth {truth.shape[:2]} does not match cube "
            f"{(cube.height, cube.width)}"
        )
    try:
        sigma2 = float(provenance["sigma2"])
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"{scene_dir}: provenance lacks a numeric sigma2") from exc
    return SyntheticScene(cube, truth, endmembers, sigma2), provenance


def spec_from_provenance(provenance: dict[str, str]) -> SceneSpec:
    """Rebuild the SceneSpec recorded in a bundle's provenance file."""
    try:
        return SceneSpec(
            height=int(provenance["height"]),
            width=int(provenance["width"]),
            block_size=int(provenance["block_size"]),
            num_endmembers=int(provenance["num_endmembers"]),
            filter_size=int(provenance["filter_size"]),
            purity_threshold=float(provenance["purity_threshold"]),
            snr_db=float(provenance["snr_db"]),
            seed=int(provenance["seed"]),
        )
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"incomplete scene provenance: {exc}") from exc


def scene_at_snr(spec: SceneSpec, snr_db: float, seed: int,
                 library: EndmemberMatrix | None = None) -> SyntheticScene:
    """Convenience: the spec's scene regenerated at a sweep grid cell."""
    return build_scene(replace(spec, snr_db=snr_db, seed=seed), library=library)
