"""Max-flow on a bipartite source/left/right/sink network with float capacities."""

from __future__ import annotations

from collections import deque

import numpy as np


def bipartite_max_flow(edges, left_caps, right_caps):
    """Maximum flow from a source through ``left -> right`` edges to a sink.

    Left node ``i`` receives at most ``left_caps[i]`` from the source, right
    node ``j`` sends at most ``right_caps[j]`` to the sink, and middle edges
    are uncapacitated. Edmonds-Karp; every augmentation saturates one residual
    exactly, so it terminates with float capacities.

    Returns ``(flow_per_edge, total)`` with flows ordered like ``edges``.
    """
    left_caps = np.asarray(left_caps, dtype=float)
    right_caps = np.asarray(right_caps, dtype=float)
    nl, nr = left_caps.size, right_caps.size
    src, sink = nl + nr, nl + nr + 1
    head, cap, adj = [], [], [[] for _ in range(nl + nr + 2)]

    def add(u, v, c):
        adj[u].append(len(head))
        head.append(v)
        cap.append(c)
        adj[v].append(len(head))
        head.append(u)
        cap.append(0.0)

    for i in range(nl):
        add(src, i, float(left_caps[i]))
    first_mid = len(head)
    for i, j in edges:
        add(int(i), nl + int(j), np.inf)
    for j in range(nr):
        add(nl + j, sink, float(right_caps[j]))

    scale = max(left_caps.max(initial=0.0), right_caps.max(initial=0.0), 1e-300)
    eps = 1e-14 * scale
    total = 0.0
    while True:
        parent = [-1] * (nl + nr + 2)
        parent[src] = -2
        queue = deque([src])
        while queue and parent[sink] == -1:
            u = queue.popleft()
            for e in adj[u]:
                v = head[e]
                if parent[v] == -1 and cap[e] > eps:
                    parent[v] = e
                    queue.append(v)
        if parent[sink] == -1:
            break
        bottleneck, v = np.inf, sink
        while v != src:
            e = parent[v]
            bottleneck = min(bottleneck, cap[e])
            v = head[e ^ 1]
        v = sink
        while v != src:
            e = parent[v]
            cap[e] -= bottleneck
            cap[e ^ 1] += bottleneck
            v = head[e ^ 1]
        total += bottleneck

    flows = np.array([cap[first_mid + 2 * k + 1] for k in range(len(edges))])
    return flows, total


def forest_flows(edges, left_caps, right_caps):
    """Exact flows on a forest that saturate every node, or ``None``.

    On a forest the flow meeting all capacities with equality is unique and
    found by peeling leaves. Returns ``None`` if some flow would be negative
    or a node is left unbalanced.
    """
    left = np.array(left_caps, dtype=float)
    right = np.array(right_caps, dtype=float)
    nl = left.size
    adj = [set() for _ in range(nl + right.size)]
    for k, (i, j) in enumerate(edges):
        adj[int(i)].add(k)
        adj[nl + int(j)].add(k)
    flows = np.zeros(len(edges))
    scale = max(left.sum(), 1e-300)
    leaves = [u for u in range(len(adj)) if len(adj[u]) == 1]
    while leaves:
        u = leaves.pop()
        if len(adj[u]) != 1:
            continue
        k = adj[u].pop()
        i, j = int(edges[k][0]), nl + int(edges[k][1])
        w = j if u == i else i
        amount = left[u] if u < nl else right[u - nl]
        if amount < -1e-12 * scale:
            return None
        amount = max(amount, 0.0)
        flows[k] = amount
        if w < nl:
            left[w] -= amount
        else:
            right[w - nl] -= amount
        adj[w].discard(k)
        if len(adj[w]) == 1:
            leaves.append(w)
        elif not adj[w]:
            rest = left[w] if w < nl else right[w - nl]
            if abs(rest) > 1e-12 * scale:
                return None
    if any(adj):
        return None
    return flows
