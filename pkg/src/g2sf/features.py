"""Feature-map data model, dataset manifests, and synthetic data generation.

A sample is a pair of spatially aligned H x W grids of feature vectors, one
per modality ("pc" for point-cloud features, "rgb" for image features), plus
a shared foreground mask and, for test data, a pixel-level ground-truth mask
stored at an integer multiple of the grid resolution.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, FormatError, ShapeError
from .tensorio import read_tensor, write_tensor

MODALITIES = ("pc", "rgb")
ANOMALY_MODES = ("pc_only", "rgb_only", "joint")

__all__ = [
    "MODALITIES",
    "ANOMALY_MODES",
    "FeatureMap",
    "SamplePair",
    "SampleRef",
    "DatasetManifest",
    "SynthConfig",
    "read_feature_map",
    "write_feature_map",
    "write_mask",
    "read_mask",
    "save_manifest",
    "load_manifest",
    "load_sample",
    "gen_synthetic_dataset",
]


@dataclass
class FeatureMap:
    """One modality of one sample: an (H, W, D) float32 grid plus foreground mask."""

    modality: str
    data: np.ndarray
    foreground: np.ndarray | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ShapeError(f"feature map must be (H, W, D), got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise FormatError("feature map contains non-finite values")
        if self.foreground is None:
            self.foreground = np.ones(self.data.shape[:2], dtype=bool)
        else:
            self.foreground = np.asarray(self.foreground, dtype=bool)
            if self.foreground.shape != self.data.shape[:2]:
                raise ShapeError(
                    f"foreground shape {self.foreground.shape} != grid {self.data.shape[:2]}"
                )

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass
class SamplePair:
    """Aligned two-modality sample with optional pixel ground truth."""

    sample_id: str
    pc: FeatureMap
    rgb: FeatureMap
    pixel_gt: np.ndarray | None = None
    image_label: int | None = None

    def __post_init__(self):
        if (self.pc.height, self.pc.width) != (self.rgb.height, self.rgb.width):
            raise ShapeError(
                f"modalities disagree on grid: pc {self.pc.data.shape[:2]} "
                f"vs rgb {self.rgb.data.shape[:2]}"
            )
        if self.pixel_gt is not None:
            self.pixel_gt = np.asarray(self.pixel_gt, dtype=bool)
            gh, gw = self.pixel_gt.shape
            if gh < self.pc.height or gw < self.pc.width or gh % self.pc.height or gw % self.pc.width:
                raise ShapeError(
                    f"pixel_gt {self.pixel_gt.shape} must be an integer upscale of "
                    f"grid {(self.pc.height, self.pc.width)}"
                )

    @property
    def grid(self):
        return (self.pc.height, self.pc.width)

    @property
    def foreground(self) -> np.ndarray:
        return self.pc.foreground


def write_feature_map(fmap: FeatureMap, path):
    """Persist one modality grid; the foreground mask travels separately."""
    write_tensor(path, fmap.data, {"modality": fmap.modality})


def read_feature_map(path, modality=None, foreground=None) -> FeatureMap:
    """Load a feature map from a container or an NPY v1.0 f32 (H, W, D) file.

    ``modality`` overrides (or supplies, for NPY inputs) the modality tag.
    """
    array, header = read_tensor(path)
    if array.ndim != 3:
        raise FormatError(f"feature map in {path} has shape {array.shape}, expected (H, W, D)")
    tag = modality or header.get("modality")
    if tag is None:
        raise FormatError(f"{path} carries no modality tag; pass modality= explicitly")
    return FeatureMap(tag, array, foreground)


def write_mask(mask: np.ndarray, path, kind: str):
    write_tensor(path, np.asarray(mask, dtype=np.float32)[..., None], {"kind": kind})


def read_mask(path) -> np.ndarray:
    array, _ = read_tensor(path)
    return array[..., 0] > 0.5


@dataclass
class SampleRef:
    """Manifest entry: relative paths for one sample."""

    sample_id: str
    pc: str
    rgb: str
    foreground: str | None = None
    pixel_gt: str | None = None
    image_label: int | None = None


@dataclass
class DatasetManifest:
    split: str
    grid: tuple
    dims: dict
    samples: list
    gt_upscale: int = 1
    root: Path | None = None

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ConfigError(f"split must be train or test, got {self.split!r}")


def save_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    doc = {
        "format": "g2sf-dataset-v1",
        "split": manifest.split,
        "grid": list(manifest.grid),
        "dims": dict(manifest.dims),
        "gt_upscale": manifest.gt_upscale,
        "samples": [
            {
                "sample_id": s.sample_id,
                "pc": s.pc,
                "rgb": s.rgb,
                "foreground": s.foreground,
                "pixel_gt": s.pixel_gt,
                "image_label": s.image_label,
            }
            for s in manifest.samples
        ],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    if doc.get("format") != "g2sf-dataset-v1":
        raise FormatError(f"manifest {path} has unknown format {doc.get('format')!r}")
    samples = [SampleRef(**entry) for entry in doc["samples"]]
    return DatasetManifest(
        split=doc["split"],
        grid=tuple(doc["grid"]),
        dims=doc["dims"],
        samples=samples,
        gt_upscale=doc.get("gt_upscale", 1),
        root=path.parent,
    )


def load_sample(manifest: DatasetManifest, ref: SampleRef) -> SamplePair:
    root = manifest.root or Path(".")
    fg = read_mask(root / ref.foreground) if ref.foreground else None
    pair = SamplePair(
        sample_id=ref.sample_id,
        pc=read_feature_map(root / ref.pc, foreground=fg),
        rgb=read_feature_map(root / ref.rgb, foreground=fg),
        pixel_gt=read_mask(root / ref.pixel_gt) if ref.pixel_gt else None,
        image_label=ref.image_label,
    )
    expected = {m: manifest.dims[m] for m in MODALITIES}
    if pair.pc.dim != expected["pc"] or pair.rgb.dim != expected["rgb"]:
        raise FormatError(
            f"sample {ref.sample_id} dims ({pair.pc.dim}, {pair.rgb.dim}) "
            f"disagree with manifest {expected}"
        )
    if pair.grid != tuple(manifest.grid):
        raise FormatError(f"sample {ref.sample_id} grid {pair.grid} != manifest {manifest.grid}")
    return pair


def iter_samples(manifest: DatasetManifest):
    for ref in manifest.samples:
        yield load_sample(manifest, ref)


# ---------------------------------------------------------------------------
# Synthetic dataset generation
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Knobs for the synthetic two-modality benchmark generator.

    Normal samples are smooth spatial mixtures of per-modality Gaussian
    texture clusters; ``rho`` controls how strongly the two modalities share
    the same mixture layout. Test anomalies shift features of one or both
    modalities by ``anomaly_offset`` noise standard deviations inside a
    smooth blob region.
    """

    grid: tuple = (16, 16)
    dims: tuple = (8, 8)
    clusters: int = 4
    rho: float = 0.7
    noise_sigma: float = 0.15
    field_smoothness: float = 2.0
    mix_sharpness: float = 3.0
    n_train: int = 64
    n_test: int = 48
    anomaly_frac: float = 0.5
    anomaly_offset: float = 6.0
    anomaly_modes: tuple = ANOMALY_MODES
    anomaly_coverage: tuple = (0.06, 0.22)
    gt_upscale: int = 4
    bg_border: int = 1

    def validate(self):
        h, w = self.grid
        if min(self.dims) < 2:
            raise ConfigError("each modality needs dim >= 2")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("need at least one train and one test sample")
        if not (0.0 <= self.rho <= 1.0):
            raise ConfigError("rho must lie in [0, 1]")
        if self.clusters < 1 or self.noise_sigma <= 0:
            raise ConfigError("clusters must be >= 1 and noise_sigma > 0")
        if self.gt_upscale < 1:
            raise ConfigError("gt_upscale must be a positive integer")
        if min(h, w) <= 2 * self.bg_border:
            raise ConfigError("bg_border leaves no foreground")
        bad = [m for m in self.anomaly_modes if m not in ANOMALY_MODES]
        if bad:
            raise ConfigError(f"unknown anomaly modes {bad}")
        lo, hi = self.anomaly_coverage
        if not (0 < lo <= hi < 1):
            raise ConfigError("anomaly_coverage band must satisfy 0 < lo <= hi < 1")


def _smooth_field(rng, shape, smoothness):
    return gaussian_filter(rng.standard_normal(shape), sigma=smoothness, mode="reflect")


def _mixture_weights(latent, sharpness):
    z = latent * sharpness
    z -= z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _foreground_mask(cfg: SynthConfig) -> np.ndarray:
    h, w = cfg.grid
    mask = np.zeros((h, w), dtype=bool)
    b = cfg.bg_border
    mask[b : h - b if b else h, b : w - b if b else w] = True
    return mask


def _normal_sample(cfg, centers, rng):
    """Draw one normal sample: per-modality smooth cluster mixtures plus noise.

    Background cells carry the same texture process as the foreground (as an
    extractor would produce for in-distribution background); only the mask
    distinguishes them, exercising the downstream unit-scale bypass.
    """
    h, w = cfg.grid
    shared = np.stack([_smooth_field(rng, (h, w), cfg.field_smoothness) for _ in range(cfg.clusters)])
    maps = {}
    fg = _foreground_mask(cfg)
    for modality in MODALITIES:
        own = np.stack([_smooth_field(rng, (h, w), cfg.field_smoothness) for _ in range(cfg.clusters)])
        latent = cfg.rho * shared + np.sqrt(1.0 - cfg.rho**2) * own
        weights = _mixture_weights(latent, cfg.mix_sharpness)
        data = np.tensordot(weights, centers[modality], axes=(0, 0))
        data += cfg.noise_sigma * rng.standard_normal(data.shape)
        maps[modality] = FeatureMap(modality, data, fg)
    return maps


def _anomaly_region(cfg, rng, foreground):
    """Smooth blob of foreground cells with coverage drawn from the config band."""
    h, w = cfg.grid
    field = _smooth_field(rng, (h, w), cfg.field_smoothness)
    field[~foreground] = -np.inf
    lo, hi = cfg.anomaly_coverage
    n_fg = int(foreground.sum())
    count = max(1, int(round(rng.uniform(lo, hi) * n_fg)))
    order = np.argsort(field, axis=None, kind="stable")[::-1]
    mask = np.zeros(h * w, dtype=bool)
    mask[order[:count]] = True
    return mask.reshape(h, w)


def _inject_offset(fmap: FeatureMap, region, offset_sigma, rng):
    direction = rng.standard_normal(fmap.dim)
    direction /= np.linalg.norm(direction)
    data = fmap.data.copy()
    data[region] += (offset_sigma * direction).astype(np.float32)
    return FeatureMap(fmap.modality, data, fmap.foreground)


def gen_synthetic_dataset(cfg: SynthConfig, seed: int, out_dir):
    """Generate and persist the synthetic benchmark; returns (train, test) manifests.

    The whole dataset is a pure function of (cfg, seed): identical inputs
    produce byte-identical trees.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    root_seq = np.random.SeedSequence([int(seed), 0x673D])
    center_rng = np.random.default_rng(root_seq.spawn(1)[0])
    centers = {
        m: center_rng.standard_normal((cfg.clusters, dim))
        for m, dim in zip(MODALITIES, cfg.dims)
    }

    n_anom = int(round(cfg.anomaly_frac * cfg.n_test))
    modes = [cfg.anomaly_modes[i % len(cfg.anomaly_modes)] for i in range(n_anom)]

    manifests = {}
    for split, count in (("train", cfg.n_train), ("test", cfg.n_test)):
        refs = []
        for idx in range(count):
            rng = np.random.default_rng(
                np.random.SeedSequence([int(seed), 1 if split == "train" else 2, idx])
            )
            sample_id = f"{split}_{idx:04d}"
            maps = _normal_sample(cfg, centers, rng)
            fg = maps["pc"].foreground
            label = None
            gt_grid = None
            if split == "test":
                label = 0
                gt_grid = np.zeros(cfg.grid, dtype=bool)
                if idx < n_anom:
                    label = 1
                    mode = modes[idx]
                    gt_grid = _anomaly_region(cfg, rng, fg)
                    offset = cfg.anomaly_offset * cfg.noise_sigma
                    if mode in ("pc_only", "joint"):
                        maps["pc"] = _inject_offset(maps["pc"], gt_grid, offset, rng)
                    if mode in ("rgb_only", "joint"):
                        maps["rgb"] = _inject_offset(maps["rgb"], gt_grid, offset, rng)
            ref = SampleRef(
                sample_id=sample_id,
                pc=f"{split}/{sample_id}_pc.g2t",
                rgb=f"{split}/{sample_id}_rgb.g2t",
                foreground=f"{split}/{sample_id}_fg.g2t",
                pixel_gt=f"{split}/{sample_id}_gt.g2t" if split == "test" else None,
                image_label=label,
            )
            write_feature_map(maps["pc"], out_dir / ref.pc)
            write_feature_map(maps["rgb"], out_dir / ref.rgb)
            write_mask(fg, out_dir / ref.foreground, "foreground")
            if ref.pixel_gt:
                gt_pixels = np.repeat(np.repeat(gt_grid, cfg.gt_upscale, 0), cfg.gt_upscale, 1)
                write_mask(gt_pixels, out_dir / ref.pixel_gt, "pixel_gt")
            refs.append(ref)
        manifest = DatasetManifest(
            split=split,
            grid=tuple(cfg.grid),
            dims={"pc": cfg.dims[0], "rgb": cfg.dims[1]},
            samples=refs,
            gt_upscale=cfg.gt_upscale,
            root=out_dir,
        )
        save_manifest(manifest, out_dir / f"{split}_manifest.json")
        manifests[split] = manifest
    return manifests["train"], manifests["test"]
