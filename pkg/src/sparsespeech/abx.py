"""ABX discriminability over DTW-aligned segment distances.

For a triple (A, B, X) where A and X share a phone category and B differs,
the model errs when X sits closer to B than to A under the DTW distance
(ties count half). Triples are enumerated inside category cells that share
the triphone context (and, within-speaker, the speaker); oversized cells are
subsampled with a seeded rng. Scores are averaged per cell and then macro-
averaged over cells, reported as a percentage. This is one member of the
family of ABX protocols in common use; cell construction details are in
build_triples.

The DTW distance is the minimum over monotone alignment paths (steps down,
right, diagonal) of the mean local distance along the path, computed exactly
with a path-length-stratified dynamic program.
"""

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .losses import KL_FLOOR, kl_divergence

_TIE_EPS = 0.0  # exact comparison; ties are genuine equality


def frame_distance_skl(p, q):
    """Symmetric KL: KL(p || q) + KL(q || p), both with the 1e-8 floor."""
    return kl_divergence(p, q) + kl_divergence(q, p)


def frame_distance_cosine(u, v):
    """Cosine distance 1 - cos(u, v); zero vectors are rejected."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ContractError("frame_distance_cosine: shape mismatch")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ContractError("frame_distance_cosine: zero vector")
    return float(1.0 - np.dot(u, v) / (nu * nv))


def normalize_posteriorgrams(representations, tolerance=1e-4):
    """Renormalize rows that drifted off the simplex in 32-bit storage.

    Rows must be nonnegative and sum to 1 within tolerance; anything further
    off is not a posteriorgram and is rejected.
    """
    out = {}
    for utt in sorted(representations):
        rep = np.asarray(representations[utt], dtype=np.float64)
        if not np.all(np.isfinite(rep)) or np.any(rep < 0):
            raise ContractError("posteriorgram %s has negative or non-finite values" % utt)
        sums = rep.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > tolerance):
            raise ContractError("posteriorgram %s rows do not sum to 1 "
                                "(max drift %g)" % (utt, np.abs(sums - 1.0).max()))
        out[utt] = rep / sums[:, None]
    return out


def _pairwise_skl(a, b):
    """Vectorized symmetric-KL local matrix; matches the scalar route."""
    af = np.maximum(a, KL_FLOOR)
    af = af / af.sum(axis=1, keepdims=True)
    bf = np.maximum(b, KL_FLOOR)
    bf = bf / bf.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        loga = np.where(a > 0, np.log(np.maximum(a, 1e-300)), 0.0)
        logb = np.where(b > 0, np.log(np.maximum(b, 1e-300)), 0.0)
    ent_a = (a * loga).sum(axis=1)
    ent_b = (b * logb).sum(axis=1)
    kl_ab = ent_a[:, None] - a @ np.log(bf).T
    kl_ba = ent_b[None, :] - (b @ np.log(af).T).T
    out = kl_ab + kl_ba
    return np.maximum(out, 0.0)


def _pairwise_cosine(a, b):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ContractError("cosine distance: zero vector frame")
    return 1.0 - (a @ b.T) / np.outer(na, nb)


_METRICS = {
    "skl": (frame_distance_skl, _pairwise_skl),
    "cosine": (frame_distance_cosine, _pairwise_cosine),
}


def _dtw_from_local(local):
    """Min over monotone paths of (path sum / path node count), exactly."""
    m, k = local.shape
    if m < 1 or k < 1:
        raise ContractError("dtw: empty sequence")
    best = np.inf
    prev = np.full((m, k), np.inf)
    prev[0, 0] = local[0, 0]
    if m == 1 and k == 1:
        return float(local[0, 0])
    for length in range(2, m + k):
        cand = np.full((m, k), np.inf)
        cand[1:, :] = prev[:-1, :]
        cand[:, 1:] = np.minimum(cand[:, 1:], prev[:, :-1])
        cand[1:, 1:] = np.minimum(cand[1:, 1:], prev[:-1, :-1])
        cur = local + cand
        if np.isfinite(cur[m - 1, k - 1]):
            best = min(best, cur[m - 1, k - 1] / length)
        prev = cur
    return float(best)


def dtw(seq_a, seq_b, dist):
    """DTW distance between two frame matrices under a frame metric.

    dist is either a metric name ("skl", "cosine") or a callable on frame
    pairs.
    """
    seq_a = np.asarray(seq_a, dtype=np.float64)
    seq_b = np.asarray(seq_b, dtype=np.float64)
    if seq_a.ndim != 2 or seq_b.ndim != 2 or seq_a.shape[0] < 1 or seq_b.shape[0] < 1:
        raise ContractError("dtw: sequences must be nonempty (m, d) matrices")
    if seq_a.shape[1] != seq_b.shape[1]:
        raise ContractError("dtw: dimension mismatch %d vs %d"
                            % (seq_a.shape[1], seq_b.shape[1]))
    if isinstance(dist, str):
        if dist not in _METRICS:
            raise ContractError("dtw: unknown metric %r" % dist)
        scalar, _ = _METRICS[dist]
    else:
        scalar = dist
    local = np.empty((seq_a.shape[0], seq_b.shape[0]))
    for i in range(seq_a.shape[0]):
        for j in range(seq_b.shape[0]):
            local[i, j] = scalar(seq_a[i], seq_b[j])
    if not np.all(np.isfinite(local)):
        raise ContractError("dtw: non-finite local distance")
    return _dtw_from_local(local)


@dataclass(frozen=True)
class AbxLimits:
    max_triples_per_cell: int = 500
    min_segment_frames: int = 3

    def __post_init__(self):
        if self.max_triples_per_cell < 1:
            raise ContractError("AbxLimits: max_triples_per_cell must be >= 1")
        if self.min_segment_frames < 1:
            raise ContractError("AbxLimits: min_segment_frames must be >= 1")


@dataclass(frozen=True)
class AbxTriple:
    a: object
    b: object
    x: object
    cell: tuple
    condition: str


def _sample_cell(total, cap, rng):
    if total <= cap:
        return range(total)
    return sorted(int(i) for i in rng.choice(total, size=cap, replace=False))


def build_triples(segments, condition, limits, rng):
    """Enumerate ABX triples for one condition.

    within: A, B, X share speaker and context; A and X share the center
    phone, B has a different center. Cells are (speaker, context, center_A,
    center_B). across: A and B share a speaker, X is a different speaker;
    all three share the context; cells add the (speaker_AB, speaker_X) pair.
    Cells over the cap are subsampled with the provided rng.
    """
    if condition not in ("within", "across"):
        raise ContractError("build_triples: condition must be 'within' or 'across'")
    segs = [s for s in segments
            if s.end_frame - s.start_frame >= limits.min_segment_frames]
    segs.sort(key=lambda s: (s.utterance_id, s.start_frame))
    cap = limits.max_triples_per_cell
    triples = []

    if condition == "within":
        groups = {}
        for s in segs:
            groups.setdefault((s.speaker_id, s.context), {}).setdefault(
                s.center_phone, []).append(s)
        for (spk, ctxt) in sorted(groups, key=str):
            by_center = groups[(spk, ctxt)]
            centers = sorted(by_center)
            for ca in centers:
                alist = by_center[ca]
                na = len(alist)
                if na < 2:
                    continue
                for cb in centers:
                    if cb == ca:
                        continue
                    blist = by_center[cb]
                    nb = len(blist)
                    if nb < 1:
                        continue
                    cell = (spk, ctxt, ca, cb)
                    total = na * (na - 1) * nb
                    for idx in _sample_cell(total, cap, rng):
                        ai, rem = divmod(idx, (na - 1) * nb)
                        xi, bi = divmod(rem, nb)
                        if xi >= ai:
                            xi += 1
                        triples.append(AbxTriple(alist[ai], blist[bi], alist[xi],
                                                 cell, condition))
        return triples

    groups = {}
    for s in segs:
        groups.setdefault(s.context, {}).setdefault(
            (s.center_phone, s.speaker_id), []).append(s)
    for ctxt in sorted(groups, key=str):
        by_cs = groups[ctxt]
        speakers = sorted({spk for (_, spk) in by_cs})
        centers = sorted({c for (c, _) in by_cs})
        for ca in centers:
            for cb in centers:
                if cb == ca:
                    continue
                for spk_ab in speakers:
                    alist = by_cs.get((ca, spk_ab), [])
                    blist = by_cs.get((cb, spk_ab), [])
                    if not alist or not blist:
                        continue
                    for spk_x in speakers:
                        if spk_x == spk_ab:
                            continue
                        xlist = by_cs.get((ca, spk_x), [])
                        if not xlist:
                            continue
                        cell = (ctxt, ca, cb, spk_ab, spk_x)
                        na, nb, nx = len(alist), len(blist), len(xlist)
                        total = na * nb * nx
                        for idx in _sample_cell(total, cap, rng):
                            ai, rem = divmod(idx, nb * nx)
                            bi, xi = divmod(rem, nx)
                            triples.append(AbxTriple(alist[ai], blist[bi],
                                                     xlist[xi], cell, condition))
    return triples


def _segment_matrix(representations, seg):
    rep = representations.get(seg.utterance_id)
    if rep is None:
        raise ContractError("score: no representation for utterance %s"
                            % seg.utterance_id)
    if seg.end_frame > rep.shape[0]:
        raise ContractError("score: segment [%d, %d) exceeds representation of %s"
                            % (seg.start_frame, seg.end_frame, seg.utterance_id))
    return rep[seg.start_frame:seg.end_frame]


def score(triples, representations, metric, threads=None):
    """Per-cell error sums: {cell: (error_sum, triple_count)}.

    metric is "skl" or "cosine"; DTW distances are cached per segment pair
    within the call.
    """
    if isinstance(metric, str):
        if metric not in _METRICS:
            raise ContractError("score: unknown metric %r" % metric)
        _, pairwise = _METRICS[metric]
    else:
        raise ContractError("score: metric must be a name ('skl' or 'cosine')")

    cache = {}

    def seg_dtw(s1, s2):
        key = (s1, s2)
        hit = cache.get(key)
        if hit is not None:
            return hit
        local = pairwise(_segment_matrix(representations, s1),
                         _segment_matrix(representations, s2))
        val = _dtw_from_local(local)
        cache[key] = val
        return val

    def eval_triple(tr):
        d_ax = seg_dtw(tr.a, tr.x)
        d_bx = seg_dtw(tr.b, tr.x)
        if d_ax > d_bx:
            return 1.0
        if d_ax == d_bx:
            return 0.5
        return 0.0

    cells = {}
    if threads and threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        by_cell = {}
        for tr in triples:
            by_cell.setdefault(tr.cell, []).append(tr)

        def eval_cell(cell_triples):
            return sum(eval_triple(tr) for tr in cell_triples)

        keys = sorted(by_cell, key=str)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            sums = list(pool.map(eval_cell, (by_cell[k] for k in keys)))
        for k, s in zip(keys, sums):
            cells[k] = (s, len(by_cell[k]))
        return cells

    for tr in triples:
        e = eval_triple(tr)
        s, n = cells.get(tr.cell, (0.0, 0))
        cells[tr.cell] = (s + e, n + 1)
    return cells


def summarize_cells(cells):
    """Macro-average of per-cell error means, as (error_pct, n_cells, n_triples)."""
    if not cells:
        return float("nan"), 0, 0
    means = [s / n for s, n in cells.values()]
    triples = sum(n for _, n in cells.values())
    return 100.0 * float(np.mean(means)), len(cells), triples


@dataclass
class AbxReport:
    distance: str
    rows: list

    def row(self, condition, subset="all"):
        for r in self.rows:
            if r["condition"] == condition and r["subset"] == subset:
                return r
        raise KeyError((condition, subset))


def evaluate_abx(segments_by_subset, representations, conditions, metric,
                 limits, seed, threads=None):
    """Score ABX per condition and subset plus a pooled "all" row.

    segments_by_subset: {subset_name: [Segment, ...]}. Triples never cross
    subsets. The "all" row macro-averages the union of all subsets' cells.
    """
    rows = []
    root = np.random.SeedSequence(seed)
    children = iter(root.spawn(len(conditions) * max(1, len(segments_by_subset))))
    for condition in conditions:
        pooled = {}
        for subset in sorted(segments_by_subset):
            rng = np.random.default_rng(next(children))
            triples = build_triples(segments_by_subset[subset], condition, limits, rng)
            if not triples:
                warnings.warn("no %s-speaker triples for subset %r" % (condition, subset))
            cells = score(triples, representations, metric, threads=threads)
            err, n_cells, n_triples = summarize_cells(cells)
            rows.append({"condition": condition, "subset": subset,
                         "cells": n_cells, "triples": n_triples, "error_pct": err})
            for key, val in cells.items():
                pooled[(subset,) + key] = val
        err, n_cells, n_triples = summarize_cells(pooled)
        rows.append({"condition": condition, "subset": "all",
                     "cells": n_cells, "triples": n_triples, "error_pct": err})
    return AbxReport(distance=metric, rows=rows)


def write_abx_csv(report, fh):
    w = csv.writer(fh)
    w.writerow(["condition", "subset", "cells", "triples", "error_pct"])
    for r in report.rows:
        err = "" if np.isnan(r["error_pct"]) else "%.6f" % r["error_pct"]
        w.writerow([r["condition"], r["subset"], r["cells"], r["triples"], err])


def write_abx_json(report, fh):
    rows = []
    for r in report.rows:
        r = dict(r)
        if isinstance(r["error_pct"], float) and np.isnan(r["error_pct"]):
            r["error_pct"] = None
        rows.append(r)
    json.dump({"distance": report.distance, "rows": rows}, fh, indent=2)
    fh.write("\n")
