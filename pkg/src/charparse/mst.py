"""Maximum spanning arborescence decoding (Chu-Liu/Edmonds) with a single-root constraint."""

from __future__ import annotations

import numpy as np

NEG = -np.inf


def _find_cycle(heads: np.ndarray) -> list[int] | None:
    n1 = len(heads)
    color = np.zeros(n1, dtype=np.int8)
    color[0] = 2
    for start in range(1, n1):
        path = []
        v = start
        while color[v] == 0:
            color[v] = 1
            path.append(v)
            v = heads[v]
        if color[v] == 1:
            return path[path.index(v) :]
        for u in path:
            color[u] = 2
    return None


def chu_liu_edmonds(scores: np.ndarray) -> np.ndarray:
    """Best arborescence rooted at node 0.

    ``scores[h, d]`` is the score of arc h -> d over nodes 0..n; banned arcs
    are -inf. Returns ``heads`` of length n + 1 with ``heads[0] = -1``.
    Equal-scoring candidate heads resolve to the smaller index.
    """
    scores = np.array(scores, dtype=np.float64)
    n1 = scores.shape[0]
    np.fill_diagonal(scores, NEG)
    scores[:, 0] = NEG
    heads = np.argmax(scores, axis=0)
    heads[0] = -1
    cycle = _find_cycle(heads)
    if cycle is None:
        return heads

    in_cycle = np.zeros(n1, dtype=bool)
    in_cycle[cycle] = True
    outside = [v for v in range(n1) if not in_cycle[v]]
    cyc = np.array(cycle)
    m = len(outside)
    c = m  # index of the contracted node
    sub = np.full((m + 1, m + 1), NEG)
    sub[:m, :m] = scores[np.ix_(outside, outside)]
    # entering arcs: u -> v in cycle, rescored by the cycle arc it breaks
    cycle_in = scores[heads[cyc], cyc]
    enter = scores[np.ix_(outside, cyc)] - cycle_in[None, :]
    enter_best = np.argmax(enter, axis=1)
    sub[:m, c] = enter[np.arange(m), enter_best]
    # leaving arcs: best cycle node as head for each outside dependent
    leave = scores[np.ix_(cyc, outside)]
    leave_best = np.argmax(leave, axis=0)
    sub[c, :m] = leave[leave_best, np.arange(m)]

    sub_heads = chu_liu_edmonds(sub)
    result = heads.copy()
    for k, v in enumerate(outside):
        if v == 0:
            continue
        h = sub_heads[k]
        result[v] = cyc[leave_best[k]] if h == c else outside[h]
    u = sub_heads[c]
    v_enter = cyc[enter_best[u]]
    result[v_enter] = outside[u]
    return result


def tree_score(scores: np.ndarray, heads) -> float:
    """Sum of ``scores[heads[d], d]`` over dependents 1..n."""
    return float(sum(scores[heads[d], d] for d in range(1, len(heads))))


def decode_heads(arc_scores: np.ndarray) -> list[int]:
    """Best single-rooted tree from arc scores of shape [(n+1), n].

    Column i-1 scores candidate heads of token i. Returns 1-based heads, one
    per token, with exactly one token attached to the root.
    """
    n = arc_scores.shape[1]
    if n == 0:
        raise ValueError("cannot decode an empty sentence")
    if arc_scores.shape[0] != n + 1:
        raise ValueError(f"arc scores must be [(n+1) x n], got {arc_scores.shape}")
    full = np.full((n + 1, n + 1), NEG)
    full[:, 1:] = arc_scores
    heads = chu_liu_edmonds(full)
    if int((heads[1:] == 0).sum()) == 1:
        return heads[1:].tolist()
    best, best_score = None, NEG
    for r in range(1, n + 1):
        constrained = full.copy()
        root_col = constrained[0, r]
        constrained[0, :] = NEG
        constrained[0, r] = root_col
        constrained[1:, r] = NEG
        if not np.isfinite(root_col):
            continue
        cand = chu_liu_edmonds(constrained)
        s = tree_score(constrained, cand)
        if best is None or s > best_score:
            best, best_score = cand, s
    if best is None:
        raise ValueError("no single-rooted tree has finite score")
    return best[1:].tolist()
