#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Writes tests/fixtures/graph_fixture.json and prune_fixture.json.

Run once; the outputs are checked in. Pure Python so the C++ side gets an
independent reading of the graph schema and the pruning rules.
"""
import json
import random
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def cumulative(values, p):
    mags = sorted((abs(v) for v in values if v != 0.0), reverse=True)
    if not mags:
        return None, []
    total = sum(mags)
    prefix = 0.0
    for k, a in enumerate(mags):
        prefix += a
        if prefix >= p * total:
            return a, k + 1
    raise AssertionError("unreachable")


def prune_cases(rng):
    cases = []
    for n in (3, 5, 8):
        for _ in range(4):
            # Quantized values make ties common.
            A = [[rng.choice([0.0, 0.25, -0.25, 0.5, -1.0, 1.0, 2.0, rng.uniform(-3, 3)])
                  if i <= j else 0.0 for i in range(n)] for j in range(n)]
            p = rng.choice([0.3, 0.5, 0.85, 1.0])
            tau_g = rng.choice([0.25, 0.5, 1.0])
            flat = [v for row in A for v in row]
            tau, k_star = cumulative(flat, p)
            cum = [[j, i] for j in range(n) for i in range(n)
                   if tau is not None and A[j][i] != 0.0 and abs(A[j][i]) >= tau]
            glob = [[j, i] for j in range(n) for i in range(n) if abs(A[j][i]) > tau_g]
            cases.append({"A": A, "p": p, "tau_global": tau_g, "k_star": k_star,
                          "cumulative": cum, "global": glob})
    return cases


def graph(rng):
    L, n = 4, 6
    target = (L - 1, n - 1)
    nodes = {(l, i): round(rng.uniform(-1, 1), 6) for l in range(-1, L) for i in range(n)
             if rng.random() < 0.85}
    nodes[target] = 0.75
    edges = []
    for s in range(-1, L - 1):
        for j in range(n):
            for i in range(j + 1):
                if (s, i) in nodes and (s + 1, j) in nodes and rng.random() < 0.55:
                    edges.append((s, i, s + 1, j, round(rng.uniform(-2, 2), 6)))
    # Reverse reachability from the target.
    reached, frontier = {target}, [target]
    while frontier:
        k = frontier.pop()
        for s, i, t, j, _ in edges:
            if (t, j) == k and (s, i) not in reached:
                reached.add((s, i))
                frontier.append((s, i))
    kept_edges = sorted((e for e in edges if (e[0], e[1]) in reached and (e[2], e[3]) in reached),
                        key=lambda e: (e[0], e[2], e[3], e[1]))
    doc = {
        "schema_version": 1,
        "case_id": "fixture",
        "rule_variant": "attnlrp",
        "prune": {"mode": "cumulative", "tau": 0.01, "p": 0.85, "node_threshold": 0.01},
        "layer_pairs": [[s, s + 1] for s in range(-1, L - 1)],
        "target": {"layer": target[0], "pos": target[1], "relevance": 0.75},
        "nodes": [{"layer": l, "pos": i, "relevance": nodes[(l, i)]} for l, i in sorted(reached)],
        "edges": [{"s": s, "i": i, "t": t, "j": j, "w": w} for s, i, t, j, w in kept_edges],
        "flags": {"empty": not kept_edges, "target_reinstated": False},
    }
    full = dict(doc)
    full["case_id"] = "fixture-unreduced"
    full["nodes"] = [{"layer": l, "pos": i, "relevance": r} for (l, i), r in sorted(nodes.items())]
    full["edges"] = [{"s": s, "i": i, "t": t, "j": j, "w": w} for s, i, t, j, w in edges]
    return doc, full


def main():
    rng = random.Random(2024)
    OUT.mkdir(parents=True, exist_ok=True)
    reduced, full = graph(rng)
    (OUT / "graph_fixture.json").write_text(json.dumps(reduced, indent=2, sort_keys=True) + "\n")
    (OUT / "graph_fixture_unreduced.json").write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")
    counts = {"nodes": len(reduced["nodes"]), "edges": len(reduced["edges"]),
              "unreduced_nodes": len(full["nodes"]), "unreduced_edges": len(full["edges"])}
    (OUT / "graph_fixture_counts.json").write_text(json.dumps(counts, indent=2) + "\n")
    (OUT / "prune_fixture.json").write_text(json.dumps(prune_cases(rng), indent=1) + "\n")
    print(counts)


if __name__ == "__main__":
    main()
