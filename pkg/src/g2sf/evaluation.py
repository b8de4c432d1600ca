"""Detection and segmentation metrics: AUROC, AUPRO, and dataset evaluation.

AUROC is rank-based (Mann-Whitney) with ties contributing one half. AUPRO
sweeps every distinct score value across the whole test split, tracks the
false-positive rate over normal pixels and the mean per-region overlap over
8-connected ground-truth components, and integrates PRO against FPR up to a
configurable limit (normalized by the limit).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, UndefinedMetricError
from .features import DatasetManifest, load_sample
from .scoring import AGGREGATIONS, sample_maps, score_sample, upsample_smooth

__all__ = [
    "EvalConfig",
    "EvalReport",
    "auroc",
    "connected_components",
    "aupro",
    "aupro_curve",
    "eval_dataset",
    "ablation_scores",
    "write_ablation_csv",
]

_EIGHT = np.ones((3, 3), dtype=bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; ties count one half.

    Undefined (raises) when only one class is present or when every score is
    identical, since no ranking exists in either case.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(int)
    if scores.shape != labels.shape:
        raise ConfigError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    if scores.min() == scores.max():
        raise UndefinedMetricError("AUROC is undefined for constant scores")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def connected_components(mask: np.ndarray):
    """8-connected components of a boolean mask: (labels, count)."""
    return ndimage.label(np.asarray(mask, dtype=bool), structure=_EIGHT)


def aupro_curve(score_maps, gt_masks, bins=None):
    """(fpr, pro) curve points over all distinct scores, threshold descending.

    The curve starts at (0, 0) (threshold above every score) and ends at
    (1, 1) (threshold at the minimum score, everything predicted). With
    ``bins`` set, scores are quantized to that many levels first: a fast
    approximate path for very large maps, excluded from exactness tests.
    """
    if len(score_maps) != len(gt_masks) or not score_maps:
        raise ConfigError("need equally many score maps and ground-truth masks")
    comp_ids = []
    comp_sizes = []
    scores = []
    next_comp = 0
    for smap, gt in zip(score_maps, gt_masks):
        smap = np.asarray(smap, dtype=np.float64)
        gt = np.asarray(gt, dtype=bool)
        if smap.shape != gt.shape:
            raise ConfigError(f"score map {smap.shape} and mask {gt.shape} disagree")
        labels, count = connected_components(gt)
        ids = np.where(gt, labels + next_comp - 1, -1)  # -1 marks normal pixels
        for c in range(1, count + 1):
            comp_sizes.append(int((labels == c).sum()))
        next_comp += count
        comp_ids.append(ids.reshape(-1))
        scores.append(smap.reshape(-1))
    comp_ids = np.concatenate(comp_ids)
    scores = np.concatenate(scores)
    comp_sizes = np.asarray(comp_sizes, dtype=np.float64)
    if comp_sizes.size == 0:
        raise UndefinedMetricError("AUPRO needs at least one anomalous region")
    n_normal = int((comp_ids < 0).sum())
    if n_normal == 0:
        raise UndefinedMetricError("AUPRO needs normal pixels for the FPR axis")
    if bins is not None:
        lo, hi = scores.min(), scores.max()
        if hi > lo:
            scores = np.floor((scores - lo) / (hi - lo) * bins).clip(0, bins - 1)

    order = np.argsort(scores, kind="stable")[::-1]
    sorted_scores = scores[order]
    sorted_comps = comp_ids[order]
    fprs = [0.0]
    pros = [0.0]
    fp = 0
    tp = np.zeros(comp_sizes.size)
    i = 0
    total = scores.size
    while i < total:
        j = i
        while j + 1 < total and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        block = sorted_comps[i : j + 1]
        fp += int((block < 0).sum())
        anom = block[block >= 0]
        if anom.size:
            np.add.at(tp, anom, 1.0)
        fprs.append(fp / n_normal)
        pros.append(float((tp / comp_sizes).mean()))
        i = j + 1
    return np.asarray(fprs), np.asarray(pros)


def _clip_integrate(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoidal integral of the piecewise-linear curve on [0, limit]."""
    area = 0.0
    for i in range(1, x.size):
        x0, x1 = x[i - 1], x[i]
        y0, y1 = y[i - 1], y[i]
        if x0 >= limit:
            break
        if x1 <= limit:
            area += (x1 - x0) * (y0 + y1) / 2.0
        else:
            y_at = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            area += (limit - x0) * (y0 + y_at) / 2.0
            break
    return area


def aupro(score_maps, gt_masks, limit: float, bins=None) -> float:
    """Area under the PRO-vs-FPR curve on [0, limit], normalized by the limit."""
    if not (0.0 < limit <= 1.0):
        raise ConfigError(f"integration limit {limit} outside (0, 1]")
    fprs, pros = aupro_curve(score_maps, gt_masks, bins=bins)
    return _clip_integrate(fprs, pros, limit) / limit


# ---------------------------------------------------------------------------
# Dataset evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalConfig:
    k: int = 5
    agg: str = "min"
    smooth_sigma: float = 4.0
    upsample_factor: int | None = None  # default: the manifest's gt upscale
    aupro_limits: tuple = (0.30, 0.01)
    threads: int = 1
    max_curve_points: int = 512

    def validate(self):
        if self.agg not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.agg!r}")
        if self.k < 0 or self.smooth_sigma < 0 or self.threads < 1:
            raise ConfigError("k, smooth_sigma must be nonnegative and threads >= 1")


@dataclass
class EvalReport:
    i_auroc: float | None = None
    p_auroc: float | None = None
    aupro: dict = field(default_factory=dict)
    per_sample: list = field(default_factory=list)
    curve: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def to_dict(self):
        return {
            "i_auroc": self.i_auroc,
            "p_auroc": self.p_auroc,
            "aupro": {str(k): v for k, v in self.aupro.items()},
            "per_sample": self.per_sample,
            "curve": self.curve,
            "flags": self.flags,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        return cls(
            i_auroc=doc.get("i_auroc"),
            p_auroc=doc.get("p_auroc"),
            aupro={float(k): v for k, v in doc.get("aupro", {}).items()},
            per_sample=doc.get("per_sample", []),
            curve=doc.get("curve", []),
            flags=doc.get("flags", []),
        )


def _sample_label(pair) -> int:
    if pair.image_label is not None:
        return int(pair.image_label)
    if pair.pixel_gt is not None:
        return int(pair.pixel_gt.any())
    raise UndefinedMetricError(f"sample {pair.sample_id} has neither label nor ground truth")


def _pixel_map(score_map, pair, cfg, factor):
    return upsample_smooth(score_map, factor, cfg.smooth_sigma).upsampled


def _run_samples(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))  # ordered collection keeps determinism


def report_from_maps(sample_ids, sample_scores, labels, pixel_maps, gt_masks,
                     aupro_limits=(0.30, 0.01), max_curve_points=512) -> EvalReport:
    """Assemble an EvalReport from precomputed per-sample scores and maps.

    ``gt_masks`` entries may be None; any missing mask omits the pixel
    metrics with a flag. Shapes of maps and masks must agree pairwise.
    """
    report = EvalReport()
    for sid, score, label in zip(sample_ids, sample_scores, labels):
        report.per_sample.append(
            {"sample_id": sid, "score": float(score), "label": int(label)}
        )
    report.i_auroc = auroc(sample_scores, labels)

    missing = sum(1 for g in gt_masks if g is None)
    if missing:
        report.flags.append(f"pixel_metrics_omitted:no_ground_truth:{missing}")
        return report
    for sid, pixel, gt in zip(sample_ids, pixel_maps, gt_masks):
        if gt.shape != pixel.shape:
            raise ConfigError(f"sample {sid}: upsampled map {pixel.shape} != gt {gt.shape}")
    flat_scores = np.concatenate([m.reshape(-1) for m in pixel_maps])
    flat_gt = np.concatenate([g.reshape(-1) for g in gt_masks])
    report.p_auroc = auroc(flat_scores, flat_gt)
    fprs, pros = aupro_curve(pixel_maps, gt_masks)
    for limit in aupro_limits:
        report.aupro[limit] = _clip_integrate(fprs, pros, limit) / limit
    stride = max(1, fprs.size // max_curve_points)
    report.curve = [[float(f), float(p)] for f, p in zip(fprs[::stride], pros[::stride])]
    return report


def eval_dataset(checkpoint, test_manifest: DatasetManifest, cfg: EvalConfig) -> EvalReport:
    """Compute I-AUROC, P-AUROC and AUPRO at the configured limits.

    Pixel metrics use the upsampled + smoothed maps; the image metric uses
    the per-sample max over foreground grid cells. When any sample lacks a
    pixel ground-truth mask the pixel metrics are omitted with a flag.
    """
    cfg.validate()
    if checkpoint.banks is None:
        raise ConfigError("checkpoint has no banks attached; load them first")
    factor = cfg.upsample_factor or test_manifest.gt_upscale

    def one(ref):
        pair = load_sample(test_manifest, ref)
        smap = score_sample(
            checkpoint.model, pair, checkpoint.banks, checkpoint.normalizer, cfg.k, cfg.agg
        )
        pixel = _pixel_map(smap, pair, cfg, factor)
        return pair, smap, pixel

    results = _run_samples(one, list(test_manifest.samples), cfg.threads)
    return report_from_maps(
        sample_ids=[pair.sample_id for pair, _, _ in results],
        sample_scores=[float(smap.sample_score) for _, smap, _ in results],
        labels=[_sample_label(pair) for pair, _, _ in results],
        pixel_maps=[pixel for _, _, pixel in results],
        gt_masks=[pair.pixel_gt for pair, _, _ in results],
        aupro_limits=cfg.aupro_limits,
        max_curve_points=cfg.max_curve_points,
    )


# ---------------------------------------------------------------------------
# Ablation tables
# ---------------------------------------------------------------------------

SCORE_VARIANTS = ("s_pc", "s_rgb", "w_pc", "w_rgb", "fused")
_VARIANT_MAP_KEY = {"s_pc": "s_pc", "s_rgb": "s_rgb", "w_pc": "w_pc", "w_rgb": "w_rgb",
                    "fused": "min"}


def ablation_scores(checkpoint, test_manifest: DatasetManifest, cfg: EvalConfig):
    """Metric rows for the five score definitions and four aggregations.

    Returns (variant_rows, aggregation_rows); each row maps
    variant -> i_auroc / p_auroc / aupro@limit values.
    """
    cfg.validate()
    if checkpoint.banks is None:
        raise ConfigError("checkpoint has no banks attached; load them first")
    factor = cfg.upsample_factor or test_manifest.gt_upscale

    def one(ref):
        pair = load_sample(test_manifest, ref)
        maps = sample_maps(checkpoint.model, pair, checkpoint.banks,
                           checkpoint.normalizer, cfg.k)
        pixels = {name: _pixel_map(m, pair, cfg, factor) for name, m in maps.items()}
        return pair, maps, pixels

    results = _run_samples(one, list(test_manifest.samples), cfg.threads)
    labels = [_sample_label(pair) for pair, _, _ in results]
    have_gt = all(pair.pixel_gt is not None for pair, _, _ in results)
    gt_masks = [pair.pixel_gt for pair, _, _ in results] if have_gt else None

    def metrics_for(key):
        row = {}
        row["i_auroc"] = auroc([maps[key].sample_score for _, maps, _ in results], labels)
        if have_gt:
            pixel_maps = [pixels[key] for _, _, pixels in results]
            flat = np.concatenate([m.reshape(-1) for m in pixel_maps])
            flat_gt = np.concatenate([g.reshape(-1) for g in gt_masks])
            row["p_auroc"] = auroc(flat, flat_gt)
            fprs, pros = aupro_curve(pixel_maps, gt_masks)
            for limit in cfg.aupro_limits:
                row[f"aupro@{limit}"] = _clip_integrate(fprs, pros, limit) / limit
        return row

    variant_rows = [{"variant": v, **metrics_for(_VARIANT_MAP_KEY[v])} for v in SCORE_VARIANTS]
    agg_rows = [{"variant": agg, **metrics_for(agg)} for agg in AGGREGATIONS]
    return variant_rows, agg_rows


def write_ablation_csv(rows, path, limits=(0.30, 0.01)):
    """Fixed column order: variant, I-AUROC, P-AUROC, AUPRO@30%, AUPRO@1%."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = ["variant", "I-AUROC", "P-AUROC"] + [f"AUPRO@{round(l * 100):d}%" for l in limits]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            out = [row["variant"], _fmt(row.get("i_auroc")), _fmt(row.get("p_auroc"))]
            out += [_fmt(row.get(f"aupro@{l}")) for l in limits]
            writer.writerow(out)


def _fmt(value):
    return "" if value is None else f"{value:.6f}"
