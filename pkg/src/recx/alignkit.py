"""Confidence-weighted global alignment of pairwise pointmaps.

Each edge of a view graph carries two pointmaps predicted for a view
pair, both expressed in the first view's camera frame, plus per-pixel
confidences.  Alignment jointly optimizes one fused pointmap per view
and one similarity transform per edge so that every edge's prediction,
mapped through its transform, agrees with the fused maps:

    minimize  sum_e sum_{v in e} sum_i  C_i^{v,e} * || P_i^v - s_e (R_e p_i^{v,e} + ...) ||

with the residual norm unsquared (robust form).  The gauge is fixed by
freezing the first edge's transform to the identity with unit scale,
which declares the world frame to be that edge's reference-view camera
frame.

The optimizer is steepest descent with step-halving on loss increase;
each parameter block's gradient is normalized by the confidence mass
touching it (see the ledger in the repo notes for why), quaternions are
re-normalized after every accepted step, and scales are optimized in
log space.  The accepted-loss trace is non-increasing by construction.

Because plain descent cannot pull a transform across a large rotation
while thousands of point variables drag behind it, the edge transforms
are warm-started before descent: walking the graph outward from the
gauge edge, each edge's similarity is fit in closed form (weighted
Procrustes with scale) against the per-view point estimates accumulated
so far.  Descent then polishes everything jointly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rotation import quat_normalize, quat_to_matrix, quat_to_matrix_jacobian
from .scenegen import ConfidenceMap, PointMap, ZeroOverlapError

__all__ = [
    "Edge",
    "ViewGraph",
    "EdgeTransform",
    "GlobalCloud",
    "AlignResult",
    "GraphDisconnectedError",
    "AlignmentDivergenceError",
    "pointmap_norm",
    "pairwise_regression_loss",
    "build_view_graph",
    "global_align",
    "save_cloud_ply",
    "save_alignment_report",
]


class GraphDisconnectedError(RuntimeError):
    """View graph splits into several components; lists them."""

    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        super().__init__(f"view graph is disconnected: components {self.components}")


class AlignmentDivergenceError(RuntimeError):
    """Alignment loss blew past 1e6x its initial value; carries the trace."""

    def __init__(self, trace):
        self.trace = np.asarray(trace, dtype=np.float64)
        super().__init__(
            f"alignment diverged: loss {self.trace[-1]:.3e} "
            f"from initial {self.trace[0]:.3e}")


@dataclass
class Edge:
    """Pairwise prediction for views (i, j), both maps in view i's frame."""
    i: int
    j: int
    pm_i: PointMap
    pm_j: PointMap
    conf_i: ConfidenceMap
    conf_j: ConfidenceMap
    overlap: float = 1.0


@dataclass
class ViewGraph:
    n_views: int
    edges: list


@dataclass
class EdgeTransform:
    """Similarity p -> scale * R p + translation."""
    rotation: np.ndarray     # quaternion (w, x, y, z)
    translation: np.ndarray
    scale: float

    def __post_init__(self):
        self.rotation = quat_normalize(np.asarray(self.rotation, dtype=np.float64))
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.scale = float(self.scale)

    @staticmethod
    def identity() -> "EdgeTransform":
        return EdgeTransform(np.array([1.0, 0, 0, 0]), np.zeros(3), 1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (points @ quat_to_matrix(self.rotation).T) + self.translation

    def inverse(self) -> "EdgeTransform":
        r = quat_to_matrix(self.rotation)
        s = 1.0 / self.scale
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return EdgeTransform(q, -s * (r.T @ self.translation), s)

    def compose(self, other: "EdgeTransform") -> "EdgeTransform":
        """self after other: (self.compose(other)).apply(p) == self.apply(other.apply(p))."""
        ra = quat_to_matrix(self.rotation)
        from .rotation import matrix_to_quat
        rb = quat_to_matrix(other.rotation)
        return EdgeTransform(
            matrix_to_quat(ra @ rb),
            self.scale * (ra @ other.translation) + self.translation,
            self.scale * other.scale,
        )


@dataclass
class GlobalCloud:
    """Fused per-view pointmaps in the gauge (world) frame."""
    view_points: list      # list[PointMap]
    view_conf: list        # list[ConfidenceMap]

    def merged(self):
        """(points, confidence) arrays over all views' valid pixels."""
        pts, conf = [], []
        for pm, cm in zip(self.view_points, self.view_conf):
            pts.append(pm.points[pm.valid])
            conf.append(cm.weights[pm.valid])
        return np.concatenate(pts, axis=0), np.concatenate(conf, axis=0)


@dataclass
class AlignResult:
    cloud: GlobalCloud
    transforms: list
    loss: float
    trace: np.ndarray
    iterations: int


# ---------------------------------------------------------------------------
# losses / norms
# ---------------------------------------------------------------------------

def pointmap_norm(maps) -> float:
    """Mean Euclidean distance of all valid points from the origin."""
    total, count = 0.0, 0
    for pm in maps:
        pts = pm.valid_points() if isinstance(pm, PointMap) else np.asarray(pm)
        pts = pts.reshape(-1, 3)
        total += float(np.linalg.norm(pts, axis=1).sum())
        count += pts.shape[0]
    if count == 0:
        raise ValueError("pointmap_norm: no valid points")
    return total / count


def pairwise_regression_loss(pred_i: PointMap, pred_j: PointMap,
                             gt_i: PointMap, gt_j: PointMap,
                             conf_i: ConfidenceMap, conf_j: ConfidenceMap) -> float:
    """Scale-normalized regression loss between predicted and true maps.

    Both sides are divided by their own mean point distance before the
    confidence-weighted mean of per-point Euclidean errors, making the
    loss invariant to a global rescaling of either side.
    """
    z_pred = pointmap_norm([pred_i, pred_j])
    z_gt = pointmap_norm([gt_i, gt_j])
    num, den = 0.0, 0.0
    for pred, gt, conf in ((pred_i, gt_i, conf_i), (pred_j, gt_j, conf_j)):
        both = pred.valid & gt.valid
        if not both.any():
            continue
        err = np.linalg.norm(pred.points[both] / z_pred - gt.points[both] / z_gt,
                             axis=1)
        w = conf.weights[both]
        num += float((w * err).sum())
        den += float(w.sum())
    if den == 0.0:
        raise ValueError("pairwise_regression_loss: no jointly valid pixels")
    return num / den


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------

def build_view_graph(n_views: int, pairwise_source, min_overlap: float = 0.1) -> ViewGraph:
    """Call ``pairwise_source(i, j)`` for every pair and keep usable edges.

    The source returns an object with pm_a/pm_b/conf_a/conf_b/overlap
    (see scenegen.PairwisePointmaps) or raises ZeroOverlapError.  Pairs
    under ``min_overlap`` are skipped.  Raises GraphDisconnectedError if
    the surviving edges do not connect all views.
    """
    edges = []
    for i in range(n_views):
        for j in range(i + 1, n_views):
            try:
                pair = pairwise_source(i, j)
            except ZeroOverlapError:
                continue
            if pair.overlap < min_overlap:
                continue
            edges.append(Edge(i, j, pair.pm_a, pair.pm_b,
                              pair.conf_a, pair.conf_b, pair.overlap))

    parent = list(range(n_views))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in edges:
        parent[find(e.i)] = find(e.j)
    comps: dict[int, list] = {}
    for v in range(n_views):
        comps.setdefault(find(v), []).append(v)
    if len(comps) > 1:
        raise GraphDisconnectedError(list(comps.values()))
    return ViewGraph(n_views=n_views, edges=edges)


# ---------------------------------------------------------------------------
# global alignment
# ---------------------------------------------------------------------------

class _Problem:
    """Flattened observation tables for fast loss/gradient evaluation."""

    def __init__(self, graph: ViewGraph):
        self.graph = graph
        h, w = graph.edges[0].pm_i.points.shape[:2]
        self.shape = (h, w)

        # union of observed pixels per view -> row indexing into X_v
        masks = [np.zeros((h, w), dtype=bool) for _ in range(graph.n_views)]
        for e in graph.edges:
            masks[e.i] |= e.pm_i.valid & (e.conf_i.weights > 0)
            masks[e.j] |= e.pm_j.valid & (e.conf_j.weights > 0)
        self.masks = masks
        self.row_of = []
        for v in range(graph.n_views):
            rows = np.full((h, w), -1, dtype=np.int64)
            rows[masks[v]] = np.arange(int(masks[v].sum()))
            self.row_of.append(rows)

        # per edge-side: (edge_idx, view, rows, preds, conf)
        self.sides = []
        for k, e in enumerate(graph.edges):
            for view, pm, cm in ((e.i, e.pm_i, e.conf_i), (e.j, e.pm_j, e.conf_j)):
                sel = pm.valid & (cm.weights > 0)
                rows = self.row_of[view][sel]
                self.sides.append({
                    "edge": k,
                    "view": view,
                    "rows": rows,
                    "pred": pm.points[sel],
                    "conf": cm.weights[sel],
                })

        # block normalizers (fixed): confidence mass per block
        self.x_mass = [np.zeros(int(m.sum())) for m in masks]
        self.t_mass = np.zeros(len(graph.edges))
        self.r_mass = np.zeros(len(graph.edges))
        for s in self.sides:
            np.add.at(self.x_mass[s["view"]], s["rows"], s["conf"])
            self.t_mass[s["edge"]] += s["conf"].sum()
            self.r_mass[s["edge"]] += (s["conf"] * np.linalg.norm(s["pred"], axis=1)).sum()
        self.r_mass = np.maximum(self.r_mass, 1e-12)
        self.t_mass = np.maximum(self.t_mass, 1e-12)

    def init_points(self, quats=None, trans=None, logs=None):
        """Confidence-weighted average of predictions under the given transforms.

        With no transforms the predictions are averaged as-is (identity).
        """
        xs = [np.zeros((m.shape[0], 3)) for m in self.x_mass]
        rs = None if quats is None else [quat_to_matrix(q) for q in quats]
        for s in self.sides:
            pred = s["pred"]
            if rs is not None:
                k = s["edge"]
                pred = np.exp(logs[k]) * (pred @ rs[k].T) + trans[k]
            np.add.at(xs[s["view"]], s["rows"], s["conf"][:, None] * pred)
        return [x / m[:, None] for x, m in zip(xs, self.x_mass)]

    def loss(self, xs, quats, trans, logs):
        total = 0.0
        rs = [quat_to_matrix(q) for q in quats]
        ss = np.exp(logs)
        for s in self.sides:
            k = s["edge"]
            mapped = ss[k] * (s["pred"] @ rs[k].T) + trans[k]
            r = xs[s["view"]][s["rows"]] - mapped
            total += float((s["conf"] * np.linalg.norm(r, axis=1)).sum())
        return total

    def loss_and_grads(self, xs, quats, trans, logs):
        n_e = len(self.graph.edges)
        gx = [np.zeros_like(x) for x in xs]
        gq = np.zeros((n_e, 4))
        gt = np.zeros((n_e, 3))
        gl = np.zeros(n_e)
        rs, jac = [], []
        for q in quats:
            r, j = quat_to_matrix_jacobian(q)
            rs.append(r)
            jac.append(j)
        ss = np.exp(logs)
        total = 0.0
        for s in self.sides:
            k = s["edge"]
            rp = s["pred"] @ rs[k].T
            mapped = ss[k] * rp + trans[k]
            r = xs[s["view"]][s["rows"]] - mapped
            norms = np.linalg.norm(r, axis=1)
            total += float((s["conf"] * norms).sum())
            u = r / np.maximum(norms, 1e-12)[:, None]
            cu = s["conf"][:, None] * u
            np.add.at(gx[s["view"]], s["rows"], cu)
            gt[k] -= cu.sum(axis=0)
            # d/ds (s * rp): rp ; log-space chain multiplies by s
            gl[k] -= ss[k] * float(np.einsum("nc,nc->", cu, rp))
            # d/dR (s R p): gradient wrt R is -s * sum cu p^T
            grad_r = -ss[k] * cu.T @ s["pred"]
            gq[k] += np.einsum("ab,abq->q", grad_r, jac[k])
        return total, gx, gq, gt, gl


def _weighted_umeyama(src: np.ndarray, dst: np.ndarray, w: np.ndarray):
    """Closed-form weighted similarity fit: dst ~ s * R @ src + t.

    Returns (quaternion, translation, scale).  Falls back to the identity
    when there are fewer than 3 points or the source cloud is degenerate.
    """
    from .rotation import matrix_to_quat

    if src.shape[0] < 3 or w.sum() <= 0:
        return np.array([1.0, 0, 0, 0]), np.zeros(3), 1.0
    wsum = w.sum()
    mu_s = (w[:, None] * src).sum(axis=0) / wsum
    mu_d = (w[:, None] * dst).sum(axis=0) / wsum
    x = src - mu_s
    y = dst - mu_d
    cov = (w[:, None] * y).T @ x / wsum
    var_src = float((w * (x * x).sum(axis=1)).sum() / wsum)
    if var_src < 1e-18:
        return np.array([1.0, 0, 0, 0]), np.zeros(3), 1.0
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2] = -1.0
    rot = u @ np.diag(sign) @ vt
    scale = float((d * sign).sum() / var_src)
    scale = max(scale, 1e-12)
    t = mu_d - scale * rot @ mu_s
    return matrix_to_quat(rot), t, scale


def _warm_start(prob: _Problem):
    """Closed-form per-edge transform estimates, walked out from edge 0.

    Edge 0 is the gauge (identity).  Its mapped predictions seed per-view
    point estimates; every further edge is fit by weighted Procrustes
    against the rows already estimated for its views, then contributes
    its own mapped predictions for rows still unseen.  Deterministic:
    the lowest-index fittable edge goes next.
    """
    n_e = len(prob.graph.edges)
    quats = np.tile(np.array([1.0, 0, 0, 0]), (n_e, 1))
    trans = np.zeros((n_e, 3))
    logs = np.zeros(n_e)
    est = [np.zeros((m.shape[0], 3)) for m in prob.x_mass]
    econf = [np.zeros(m.shape[0]) for m in prob.x_mass]
    anchored = [np.zeros(m.shape[0], dtype=bool) for m in prob.x_mass]
    sides_of: dict[int, list] = {}
    for s in prob.sides:
        sides_of.setdefault(s["edge"], []).append(s)

    def absorb(k):
        rot = quat_to_matrix(quats[k])
        sc = float(np.exp(logs[k]))
        for s in sides_of[k]:
            mapped = sc * (s["pred"] @ rot.T) + trans[k]
            fresh = ~anchored[s["view"]][s["rows"]]
            rows = s["rows"][fresh]
            est[s["view"]][rows] = mapped[fresh]
            econf[s["view"]][rows] = s["conf"][fresh]
            anchored[s["view"]][rows] = True

    done = np.zeros(n_e, dtype=bool)
    absorb(0)
    done[0] = True
    for _ in range(n_e - 1):
        pick = -1
        for k in range(n_e):
            if done[k]:
                continue
            common = sum(int(anchored[s["view"]][s["rows"]].sum())
                         for s in sides_of[k])
            if common >= 3:
                pick = k
                break
        if pick < 0:
            break
        src, dst, wts = [], [], []
        for s in sides_of[pick]:
            sel = anchored[s["view"]][s["rows"]]
            rows = s["rows"][sel]
            src.append(s["pred"][sel])
            dst.append(est[s["view"]][rows])
            wts.append(s["conf"][sel] * econf[s["view"]][rows])
        q, t, sc = _weighted_umeyama(np.concatenate(src), np.concatenate(dst),
                                     np.concatenate(wts))
        quats[pick] = q
        trans[pick] = t
        logs[pick] = np.log(sc)
        absorb(pick)
        done[pick] = True
    return quats, trans, logs


def global_align(graph: ViewGraph, iters: int = 2000, lr: float = 1e-2,
                 seed: int = 0) -> AlignResult:
    """Jointly fit fused pointmaps and per-edge similarities.

    The first edge is the gauge: its transform stays the identity with
    unit scale, so the returned cloud lives in that edge's reference-view
    camera frame.  Deterministic for fixed inputs (``seed`` reserved for
    future stochastic variants).

    Raises AlignmentDivergenceError if the loss ever exceeds 1e6 times
    its initial value (cannot happen with the monotone step control, but
    the contract is kept explicit).
    """
    if not graph.edges:
        raise ValueError("global_align: graph has no edges")
    del seed
    prob = _Problem(graph)
    n_e = len(graph.edges)

    quats, trans, logs = _warm_start(prob)
    xs = prob.init_points(quats, trans, logs)

    cur_loss, gx, gq, gt, gl = prob.loss_and_grads(xs, quats, trans, logs)
    init_loss = cur_loss
    trace = np.empty(iters)
    step = lr
    for it in range(iters):
        cand_xs = [x - step * g / m[:, None]
                   for x, g, m in zip(xs, gx, prob.x_mass)]
        cand_q = quats - step * gq / prob.r_mass[:, None]
        cand_q = cand_q / np.linalg.norm(cand_q, axis=1, keepdims=True)
        cand_t = trans - step * gt / prob.t_mass[:, None]
        cand_l = logs - step * gl / prob.r_mass
        # gauge: first edge frozen to identity / unit scale
        cand_q[0] = (1.0, 0.0, 0.0, 0.0)
        cand_t[0] = 0.0
        cand_l[0] = 0.0

        cand_loss = prob.loss(cand_xs, cand_q, cand_t, cand_l)
        if cand_loss <= cur_loss:
            xs, quats, trans, logs = cand_xs, cand_q, cand_t, cand_l
            cur_loss = cand_loss
            cur_loss, gx, gq, gt, gl = prob.loss_and_grads(xs, quats, trans, logs)
            step = min(step * 1.1, lr * 100.0)
        else:
            step *= 0.5
        trace[it] = cur_loss
        if cur_loss > 1e6 * max(init_loss, 1e-300):
            raise AlignmentDivergenceError(trace[: it + 1])
        if step < lr * 1e-14:
            trace[it:] = cur_loss
            break

    view_points, view_conf = [], []
    h, w = prob.shape
    for v in range(graph.n_views):
        pts = np.zeros((h, w, 3))
        pts[prob.masks[v]] = xs[v]
        conf = np.zeros((h, w))
        count = np.zeros((h, w))
        for s in prob.sides:
            if s["view"] != v:
                continue
            flat_rows = np.nonzero(prob.masks[v].reshape(-1))[0][s["rows"]]
            np.add.at(conf.reshape(-1), flat_rows, s["conf"])
            np.add.at(count.reshape(-1), flat_rows, 1.0)
        conf = np.where(count > 0, conf / np.maximum(count, 1), 0.0)
        view_points.append(PointMap(pts, prob.masks[v].copy()))
        view_conf.append(ConfidenceMap(conf))

    transforms = [EdgeTransform(q, t, float(np.exp(l)))
                  for q, t, l in zip(quats, trans, logs)]
    return AlignResult(
        cloud=GlobalCloud(view_points, view_conf),
        transforms=transforms,
        loss=float(cur_loss),
        trace=trace,
        iterations=iters,
    )


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def save_cloud_ply(path, cloud: GlobalCloud, colors: np.ndarray = None) -> None:
    """ASCII PLY with per-point confidence (plus optional uchar rgb)."""
    pts, conf = cloud.merged()
    lines = [
        "ply",
        "format ascii 1.0",
        "comment fused pointmap cloud",
        f"element vertex {pts.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "property float confidence",
    ]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
        rgb = np.clip(colors * 255.0 + 0.5, 0, 255).astype(np.uint8)
    lines.append("end_header")
    body = []
    for idx in range(pts.shape[0]):
        row = f"{pts[idx, 0]:.9g} {pts[idx, 1]:.9g} {pts[idx, 2]:.9g} {conf[idx]:.9g}"
        if colors is not None:
            row += f" {rgb[idx, 0]} {rgb[idx, 1]} {rgb[idx, 2]}"
        body.append(row)
    Path(path).write_text("\n".join(lines + body) + "\n")


def save_alignment_report(path, result: AlignResult) -> None:
    report = {
        "loss": result.loss,
        "iterations": result.iterations,
        "n_views": len(result.cloud.view_points),
        "n_edges": len(result.transforms),
        "transforms": [
            {
                "rotation": [float(v) for v in t.rotation],
                "translation": [float(v) for v in t.translation],
                "scale": t.scale,
            }
            for t in result.transforms
        ],
        "trace_head": [float(v) for v in result.trace[:10]],
        "trace_tail": [float(v) for v in result.trace[-10:]],
    }
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
