#!/usr/bin/env python3
"""Builds the 3-lane-chain + 2-TE topology fixture and its expected TOP values.

Independent of the C++ code: its own Bernstein sampling, Fréchet DP, IoU,
greedy matching and an AP computed by enumerating every cut-off rank.
Run from this directory; rewrites topology_chain.json.
"""
import json
import math


def straight(x0, y0, x1, y1):
    return [[x0 + (x1 - x0) * k / 3.0, y0 + (y1 - y0) * k / 3.0, 0.0] for k in range(4)]


def sample(cp, n=11):
    out = []
    for s in range(n):
        t = s / (n - 1)
        w = [(1 - t) ** 3, 3 * t * (1 - t) ** 2, 3 * t * t * (1 - t), t ** 3]
        out.append([sum(w[k] * cp[k][d] for k in range(4)) for d in range(3)])
    out[0], out[-1] = list(cp[0]), list(cp[3])
    return out


def frechet(a, b):
    memo = {}
    for i in range(len(a)):
        for j in range(len(b)):
            d = math.dist(a[i], b[j])
            if i == 0 and j == 0:
                memo[i, j] = d
            elif i == 0:
                memo[i, j] = max(memo[i, j - 1], d)
            elif j == 0:
                memo[i, j] = max(memo[i - 1, j], d)
            else:
                memo[i, j] = max(min(memo[i - 1, j], memo[i, j - 1], memo[i - 1, j - 1]), d)
    return memo[len(a) - 1, len(b) - 1]


def iou(a, b):
    iw = min(a[0] + a[2] / 2, b[0] + b[2] / 2) - max(a[0] - a[2] / 2, b[0] - b[2] / 2)
    ih = min(a[1] + a[3] / 2, b[1] + b[3] / 2) - max(a[1] - a[3] / 2, b[1] - b[3] / 2)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def greedy(confs, n_gt, accept):
    """accept(i, j) -> distance-like key or None. Lower key wins."""
    gt_to_pred = [-1] * n_gt
    order = sorted(range(len(confs)), key=lambda i: (-confs[i], i))
    for i in order:
        best = None
        for j in range(n_gt):
            if gt_to_pred[j] >= 0:
                continue
            key = accept(i, j)
            if key is not None and (best is None or key < best[0]):
                best = (key, j)
        if best is not None:
            gt_to_pred[best[1]] = i
    return gt_to_pred


def ap_exhaustive(ranked_hits, n_pos):
    """Sum over ranked positives of the best precision at any cut-off at or
    after it, divided by all positives (unranked ones count as missed)."""
    cutoffs = []
    tp = 0
    for k, h in enumerate(ranked_hits, start=1):
        tp += h
        cutoffs.append((tp / n_pos, tp / k))
    total = 0.0
    for k, h in enumerate(ranked_hits):
        if not h:
            continue
        recall_here = cutoffs[k][0]
        total += max(p for r, p in cutoffs if r >= recall_here)
    return total / n_pos


def top(scores, row_map, col_map, gt, self_edges):
    """Pairs whose row or column GT instance has no matched prediction are
    never ranked; their edges stay in the denominator."""
    gr, gc = len(gt), len(gt[0])
    known = lambda i, j: row_map[i] >= 0 and col_map[j] >= 0
    aps = []
    for v in range(gr):
        cand = [k for k in range(gc) if not (self_edges and k == v)]
        n_pos = sum(gt[v][k] for k in cand)
        if n_pos:
            ranked = sorted((k for k in cand if known(v, k)), key=lambda k: (-scores[row_map[v]][col_map[k]], k))
            aps.append(ap_exhaustive([gt[v][k] for k in ranked], n_pos))
    for v in range(gc):
        cand = [k for k in range(gr) if not (self_edges and k == v)]
        n_pos = sum(gt[k][v] for k in cand)
        if n_pos:
            ranked = sorted((k for k in cand if known(k, v)), key=lambda k: (-scores[row_map[k]][col_map[v]], k))
            aps.append(ap_exhaustive([gt[k][v] for k in ranked], n_pos))
    return sum(aps) / len(aps), aps


gt_lanes = [straight(0, 0, 10, 0), straight(10, 0, 20, 0), straight(20, 0, 30, 0), straight(0, 4, 30, 4)]
gt_l2l = [[0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 0], [0, 0, 0, 0]]
gt_tes = [{"box": [100.0, 50.0, 20.0, 40.0], "class_id": 0}, {"box": [300.0, 60.0, 30.0, 30.0], "class_id": 1}]
gt_l2t = [[1, 0], [1, 0], [0, 1], [0, 1]]

pred_lanes = [
    {"control_points": straight(20, 0, 30, 0), "confidence": 0.9},     # GT 2
    {"control_points": straight(0, 0, 10, 0), "confidence": 0.8},      # GT 0
    {"control_points": straight(0, 10, 10, 10), "confidence": 0.85},   # false positive
    {"control_points": straight(10, 0.5, 20, 0.5), "confidence": 0.7},  # GT 1, 0.5 m off
    {"control_points": straight(0, 5.5, 30, 5.5), "confidence": 0.6},  # GT 3 but 1.5 m off: unmatched at 1 m
]
pred_tes = [
    {"box": [300.0, 60.0, 30.0, 30.0], "class_id": 1, "confidence": 0.9},
    {"box": [200.0, 100.0, 20.0, 20.0], "class_id": 0, "confidence": 0.6},
    {"box": [101.0, 50.0, 20.0, 40.0], "class_id": 0, "confidence": 0.8},
]
# Scores in prediction index space; ties are deliberate.
l2l = [
    [0.0, 0.3, 0.3, 0.4, 0.2],
    [0.6, 0.0, 0.9, 0.4, 0.7],
    [0.8, 0.7, 0.0, 0.2, 0.1],
    [0.6, 0.2, 0.5, 0.0, 0.3],
    [0.5, 0.5, 0.5, 0.5, 0.0],
]
l2t = [
    [0.2, 0.9, 0.2],
    [0.4, 0.1, 0.4],
    [0.9, 0.9, 0.9],
    [0.3, 0.0, 0.7],
    [0.8, 0.2, 0.1],
]

lane_samples = [sample(l) for l in gt_lanes]
lane_map = greedy([p["confidence"] for p in pred_lanes], len(gt_lanes),
                  lambda i, j: (lambda d: d if d < 1.0 else None)(
                      frechet(sample(pred_lanes[i]["control_points"]), lane_samples[j])))
te_map = greedy([p["confidence"] for p in pred_tes], len(gt_tes),
                lambda i, j: (lambda o: -o if o >= 0.75 and pred_tes[i]["class_id"] == gt_tes[j]["class_id"] else None)(
                    iou(pred_tes[i]["box"], gt_tes[j]["box"])))

top_ll, ll_aps = top(l2l, lane_map, lane_map, gt_l2l, True)
top_lt, lt_aps = top(l2t, lane_map, te_map, gt_l2t, False)

fixture = {
    "gt": {"lanes": gt_lanes, "adj_l2l": gt_l2l, "traffic_elements": gt_tes, "adj_l2t": gt_l2t},
    "prediction": {"lanes": pred_lanes, "traffic_elements": pred_tes, "l2l": l2l, "l2t": l2t},
    "expected": {
        "lane_gt_to_pred": lane_map,
        "te_gt_to_pred": te_map,
        "top_ll": top_ll,
        "top_lt": top_lt,
        "top_ll_vertex_aps": ll_aps,
        "top_lt_vertex_aps": lt_aps,
    },
}
with open("topology_chain.json", "w") as f:
    json.dump(fixture, f, indent=1)
    f.write("\n")
print(f"TOP_ll={top_ll!r} TOP_lt={top_lt!r} lanes={lane_map} tes={te_map}")
