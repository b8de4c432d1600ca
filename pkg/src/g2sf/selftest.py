"""Embedded invariant suite: independent oracles for the core guarantees.

Each check returns (name, passed, detail). The oracles here deliberately
avoid the production code paths they validate: AUPRO is recomputed per
threshold from scratch with a hand-rolled component labeler, the coreset
bound is verified against exhaustive subset enumeration, and gradients are
compared against central finite differences evaluated above the precision
of the gradients under test.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from . import losses as losses_mod
from . import lspn as lspn_mod
from .bank import build_bank, covering_radius
from .losses import LossBatch, LossConfig
from .nn import backprop_check
from .trainer import NegativeBatch, _sattolo

__all__ = [
    "aupro_bruteforce",
    "label_components_bfs",
    "GradCheckProblem",
    "build_gradcheck_problem",
    "objective_value",
    "objective_gradients",
    "full_gradient_check",
    "run_all",
]


# ---------------------------------------------------------------------------
# Brute-force AUPRO oracle
# ---------------------------------------------------------------------------


def label_components_bfs(mask):
    """8-connected component labeling by breadth-first search (no scipy)."""
    mask = np.asarray(mask, dtype=bool)
    labels = np.zeros(mask.shape, dtype=np.int64)
    current = 0
    h, w = mask.shape
    for sr in range(h):
        for sc in range(w):
            if not mask[sr, sc] or labels[sr, sc]:
                continue
            current += 1
            queue = [(sr, sc)]
            labels[sr, sc] = current
            while queue:
                r, c = queue.pop()
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] \
                                and not labels[rr, cc]:
                            labels[rr, cc] = current
                            queue.append((rr, cc))
    return labels, current


def aupro_bruteforce(score_maps, gt_masks, limit):
    """Per-threshold full recomputation of the PRO/FPR curve and its area."""
    regions = []  # (sample_idx, boolean mask) per component
    for si, gt in enumerate(gt_masks):
        labels, count = label_components_bfs(gt)
        for c in range(1, count + 1):
            regions.append((si, labels == c))
    if not regions:
        raise ValueError("oracle needs at least one anomalous region")
    normal_masks = [~np.asarray(g, dtype=bool) for g in gt_masks]
    n_normal = sum(int(m.sum()) for m in normal_masks)
    thresholds = np.unique(np.concatenate([np.asarray(s).reshape(-1)
                                           for s in score_maps]))[::-1]
    xs, ys = [0.0], [0.0]
    for t in thresholds:
        preds = [np.asarray(s) >= t for s in score_maps]
        fp = sum(int((p & nm).sum()) for p, nm in zip(preds, normal_masks))
        overlaps = [ (preds[si] & region).sum() / region.sum()
                     for si, region in regions ]
        xs.append(fp / n_normal)
        ys.append(float(np.mean(overlaps)))
    area = 0.0
    for i in range(1, len(xs)):
        x0, x1, y0, y1 = xs[i - 1], xs[i], ys[i - 1], ys[i]
        if x0 >= limit:
            break
        if x1 <= limit:
            area += (x1 - x0) * (y0 + y1) / 2.0
        else:
            y_at = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            area += (limit - x0) * (y0 + y_at) / 2.0
            break
    return area / limit


# ---------------------------------------------------------------------------
# Full-objective gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradCheckProblem:
    """A frozen random batch plus fixed negatives and margin bounds."""

    lspn_cfg: lspn_mod.LspnConfig
    loss_cfg: LossConfig
    seed: int
    y: np.ndarray
    m_pc: np.ndarray
    m_rgb: np.ndarray
    d_pc: np.ndarray
    d_rgb: np.ndarray
    s: np.ndarray          # (B, n, 2) sorted per modality
    neg: NegativeBatch
    margin: tuple | None = None


def build_gradcheck_problem(batch=8, k=5, dims=(8, 8), widths=((8, 8), (8,)),
                            seed=0) -> GradCheckProblem:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C]))
    n = 2 * k + 1
    d_pc, d_rgb = dims

    def unit(shape):
        v = rng.standard_normal(shape)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    s = np.sort(rng.uniform(0.3, 2.0, size=(batch, n, 2)), axis=1)
    y = np.arange(batch) % 2
    normals = np.flatnonzero(y == 0)
    perm = _sattolo(normals.size, rng)
    neg = NegativeBatch(normals, normals[perm], rng.integers(0, 2, normals.size))
    lspn_cfg = lspn_mod.LspnConfig(dim_pc=d_pc, dim_rgb=d_rgb, branch_widths=widths[0],
                                   fusion_widths=widths[1], dropout=0.0)
    loss_cfg = LossConfig(k=k, m0=2.0 * float(s[:, 0, :].max()))
    return GradCheckProblem(
        lspn_cfg=lspn_cfg,
        loss_cfg=loss_cfg,
        seed=seed,
        y=y,
        m_pc=rng.standard_normal((batch, n, d_pc)).astype(np.float32),
        m_rgb=rng.standard_normal((batch, n, d_rgb)).astype(np.float32),
        d_pc=unit((batch, n, d_pc)).astype(np.float32),
        d_rgb=unit((batch, n, d_rgb)).astype(np.float32),
        s=s,
        neg=neg,
    )


def _problem_rows(problem: GradCheckProblem, dtype):
    b, n = problem.y.shape[0], problem.s.shape[1]
    protos = np.concatenate([problem.m_pc, problem.m_rgb], axis=2)
    dirs = np.concatenate([problem.d_pc, problem.d_rgb], axis=2)
    pos_p = protos.reshape(b * n, -1).astype(dtype)
    pos_d = dirs.reshape(b * n, -1).astype(dtype)
    neg = problem.neg
    m_rgb0 = problem.m_rgb[:, 0]
    d_rgb0 = problem.d_rgb[:, 0]
    proto_swap = (neg.kinds == 0)[:, None]
    neg_p = np.concatenate(
        [problem.m_pc[neg.rows, 0],
         np.where(proto_swap, m_rgb0[neg.partners], m_rgb0[neg.rows])], axis=1
    ).astype(dtype)
    neg_d = np.concatenate(
        [problem.d_pc[neg.rows, 0],
         np.where(~proto_swap, d_rgb0[neg.partners], d_rgb0[neg.rows])], axis=1
    ).astype(dtype)
    return np.concatenate([pos_p, neg_p]), np.concatenate([pos_d, neg_d]), b * n


def _model_from_params(problem: GradCheckProblem, values):
    dtype = values[0].dtype
    model = lspn_mod.init_model(problem.lspn_cfg, problem.seed).astype(dtype)
    for dst, src in zip(lspn_mod.parameters(model), values):
        dst[...] = src
    return model


def _objective(model, problem: GradCheckProblem, want_grads: bool):
    dtype = model.log_sigma.dtype
    all_p, all_d, n_pos = _problem_rows(problem, dtype)
    b, n = problem.y.shape[0], problem.s.shape[1]
    w_all, cache = lspn_mod.forward_batch(model, all_p, all_d)
    w = w_all[:n_pos].reshape(b, n, 2)
    w_neg = w_all[n_pos:]
    sigma = np.exp(model.log_sigma)
    s = problem.s.astype(dtype)
    l = (w * s * sigma).sum(axis=2)
    batch = LossBatch(y=problem.y, l=l, s=s, w0=w[:, 0, :])
    margin = problem.margin
    if margin is None:
        margin = losses_mod.margin_bounds(batch)
    if not want_grads:
        value, _ = losses_mod.total_loss(batch, w_neg, problem.loss_cfg, model, margin)
        return value
    value, parts, dl, dw0, dneg = losses_mod.total_loss_with_grads(
        batch, w_neg, problem.loss_cfg, model, margin
    )
    grad_w = dl[:, :, None] * s * sigma
    grad_w[:, 0, :] += dw0
    grad_rows = np.concatenate([grad_w.reshape(n_pos, 2), dneg], axis=0)
    grads = lspn_mod.backward_batch(model, cache, grad_rows.astype(dtype))
    for g, p, is_weight in zip(grads, lspn_mod.parameters(model),
                               lspn_mod.weight_flags(model)):
        if is_weight and problem.loss_cfg.l1_weight > 0:
            g += problem.loss_cfg.l1_weight * np.sign(p)
    d_log_sigma = (dl[:, :, None] * np.asarray(w, dtype=np.float64)
                   * np.asarray(s, dtype=np.float64)).sum(axis=(0, 1)) * \
        np.asarray(sigma, dtype=np.float64)
    grads.append(d_log_sigma.astype(dtype))
    return value, grads, margin


def objective_value(problem: GradCheckProblem, values):
    return _objective(_model_from_params(problem, values), problem, False)


def objective_gradients(problem: GradCheckProblem, dtype):
    model = lspn_mod.init_model(problem.lspn_cfg, problem.seed).astype(dtype)
    value, grads, margin = _objective(model, problem, True)
    return model, value, grads, margin


def full_gradient_check(dtype=np.float32, batch=8, seed=0, h=1e-6,
                        widths=((8, 8), (8,)), k=5):
    """Max relative error of the full-objective gradients at ``dtype``.

    The margin bounds are frozen at the base parameters (they carry no
    gradient by design), and the finite differences run one precision level
    above ``dtype``: float64 against float32 gradients, extended precision
    against float64 gradients.
    """
    problem = build_gradcheck_problem(batch=batch, seed=seed, widths=widths, k=k)
    model, _, grads, margin = objective_gradients(problem, dtype)
    problem = replace(problem, margin=margin)
    fd_dtype = np.float64 if dtype == np.float32 else np.longdouble
    return backprop_check(lambda vals: objective_value(problem, vals),
                          lspn_mod.parameters(model), grads, h=h, fd_dtype=fd_dtype)


# ---------------------------------------------------------------------------
# Check registry
# ---------------------------------------------------------------------------


def _check_gradients_f32():
    err = full_gradient_check(np.float32)
    return err < 1e-3, f"max rel err {err:.2e} (bound 1e-3)"


def _check_gradients_f64():
    err = full_gradient_check(np.float64)
    return err < 1e-6, f"max rel err {err:.2e} (bound 1e-6)"


def _check_loss_oracles():
    details = []
    ok = True

    def expect(name, got, want, tol=1e-6):
        nonlocal ok
        good = abs(got - want) <= tol * max(1.0, abs(want))
        ok = ok and good
        if not good:
            details.append(f"{name}: got {got!r}, want {want!r}")

    def batch(y, l0):
        y = np.asarray(y, dtype=float)
        l = np.tile(np.asarray(l0, float)[:, None], (1, 3))
        return LossBatch(y=y, l=l, s=np.ones((y.size, 3, 2)), w0=np.ones((y.size, 2)))

    expect("sep normal", losses_mod.sep_loss(batch([0], [0.3]), 2.0), 0.3)
    expect("sep anomalous half-threshold",
           losses_mod.sep_loss(batch([1], [1.0]), 2.0), 0.5)
    expect("margin interleaved",
           losses_mod.margin_loss(batch([0, 0, 1, 1], [1.0, 3.0, 2.0, 4.0]))[0], 2 / 3)
    cns_batch = LossBatch(y=[0], l=np.array([[1.0, 1.5, 0.8]]), s=np.ones((1, 3, 2)),
                          w0=np.ones((1, 2)))
    expect("consistency", losses_mod.consistency_loss(cns_batch, 1.2, 1), 0.5)
    expect("cma at unity", losses_mod.cma_loss(np.array([[1.0, 1.0]])),
           2 * (math.e - 1))
    cfg = LossConfig(m0=1.0, l1_weight=0.0)
    expect("weighted sum", losses_mod.combine_terms(
        {"sep": 0.5, "mar": 0.1, "cns": 0.2, "sc": 0.3, "cma": 0.4, "l1": 0.0}, cfg),
        23.9)
    return ok, "; ".join(details) if details else "all hand values reproduced"


def _check_aupro_oracle(instances=25, seed=0):
    from .evaluation import aupro

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        maps, gts = [], []
        for _ in range(2):
            maps.append(rng.random((8, 8)))
            gts.append(rng.random((8, 8)) < 0.2)
        if not any(g.any() for g in gts):
            gts[0][4, 4] = True
        for limit in (0.30, 0.01):
            worst = max(worst, abs(aupro(maps, gts, limit)
                                   - aupro_bruteforce(maps, gts, limit)))
    exact = aupro([gts[0].astype(float)], [gts[0]], 0.3)
    return worst < 1e-9 and exact == 1.0, \
        f"max |fast - bruteforce| {worst:.2e}; perfect detector -> {exact}"


def _check_coreset(seed=0):
    rng = np.random.default_rng(seed)
    worst_ratio = 0.0
    for _ in range(15):
        n = int(rng.integers(4, 13))
        points = rng.uniform(-1, 1, size=(n, 2)).astype(np.float32)
        bank = build_bank(points, "pc", 3 / n)
        greedy = covering_radius(bank, points)
        best = min(
            max(
                min(np.linalg.norm(p - points[c]) for c in combo)
                for p in points
            )
            for combo in itertools.combinations(range(n), bank.size)
        )
        worst_ratio = max(worst_ratio, greedy / max(best, 1e-12))
    return worst_ratio <= 2.0 + 1e-6, f"worst greedy/optimal ratio {worst_ratio:.3f}"


def _check_checkpoint(path):
    from .trainer import load_checkpoint

    try:
        ckpt = load_checkpoint(path)
    except Exception as exc:  # surfaced as a named failure, not a crash
        return False, f"unloadable checkpoint: {exc}"
    rng = np.random.default_rng(0)
    joint = ckpt.model.cfg.joint_dim
    protos = rng.standard_normal((32, joint)).astype(np.float32)
    dirs = rng.standard_normal((32, joint)).astype(np.float32)
    a, _ = lspn_mod.forward_batch(ckpt.model, protos, dirs)
    b, _ = lspn_mod.forward_batch(ckpt.model, protos, dirs)
    if a.tobytes() != b.tobytes():
        return False, "forward pass not deterministic"
    if a.min() < np.exp(-1) - 1e-6 or a.max() > math.e + 1e-6:
        return False, "scale outputs escape [1/e, e]"
    if not (ckpt.m0 > 0 and ckpt.normalizer.mean_pc > 0 and ckpt.normalizer.mean_rgb > 0):
        return False, "non-positive m0 or normalizer means"
    return True, f"epoch {ckpt.epoch}, sigma ({ckpt.model.sigma_pc:.3f}, " \
                 f"{ckpt.model.sigma_rgb:.3f})"


def run_all(checkpoint=None):
    """Run every embedded check; returns a list of (name, passed, detail)."""
    checks = [
        ("gradient_check_f32", _check_gradients_f32),
        ("gradient_check_f64", _check_gradients_f64),
        ("loss_oracles", _check_loss_oracles),
        ("aupro_bruteforce_agreement", _check_aupro_oracle),
        ("coreset_two_approximation", _check_coreset),
    ]
    results = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    if checkpoint is not None:
        try:
            ok, detail = _check_checkpoint(checkpoint)
        except Exception as exc:
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(("checkpoint_integrity", ok, detail))
    return results
