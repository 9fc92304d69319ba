"""Temporal random walks with exponential time-decay transitions.

A walker sitting on node ``v`` at time ``t`` may follow any incident edge
whose timestamp ``t'`` is at least ``t``; the edge is chosen with probability
proportional to ``exp(t - t')`` and the walker's clock moves to ``t'``.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .connectome import DynamicGraph
from .errors import FormatError, ValidationError

log = logging.getLogger(__name__)

START_POLICIES = ("earliest", "uniform-incident")


@dataclass(frozen=True)
class WalkConfig:
    l_max: int = 20
    walks_per_node: int = 30
    min_length: int = 2
    start_time_policy: str = "earliest"
    seed: int = 0

    def __post_init__(self):
        if self.l_max < 1 or self.walks_per_node < 1 or self.min_length < 1:
            raise ValidationError("l_max, walks_per_node and min_length must be positive")
        if self.min_length > self.l_max:
            raise ValidationError("min_length must not exceed l_max")
        if self.start_time_policy not in START_POLICIES:
            raise ValidationError(f"start_time_policy must be one of {START_POLICIES}")


@dataclass(frozen=True)
class TemporalWalk:
    """``times[i]`` is the timestamp of the edge from ``nodes[i]`` to ``nodes[i+1]``."""

    graph_id: str
    nodes: tuple
    times: tuple

    def __len__(self):
        return len(self.nodes)


@dataclass
class SamplerStats:
    attempted: int = 0
    emitted: int = 0
    rejected_isolated: int = 0
    rejected_short: int = 0
    per_graph: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


class TemporalAdjacency:
    """Per-node incident edges sorted by timestamp, for suffix lookups."""

    def __init__(self, graph: DynamicGraph):
        self.graph = graph
        R = graph.node_count
        e = graph.edges
        # each undirected edge appears once from each endpoint
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        ts = np.concatenate([e[:, 2], e[:, 2]])
        order = np.lexsort((dst, ts, src))
        src, dst, ts = src[order], dst[order], ts[order]
        bounds = np.searchsorted(src, np.arange(R + 1))
        self.nbr = [dst[bounds[v]:bounds[v + 1]] for v in range(R)]
        self.times = [ts[bounds[v]:bounds[v + 1]] for v in range(R)]
        self._time_lists = [t.tolist() for t in self.times]
        self._tables = {}

    def degree(self, v: int) -> int:
        return len(self.nbr[v])

    def neighborhood(self, v: int, t: int) -> tuple[np.ndarray, np.ndarray]:
        """(neighbours, timestamps) of edges incident to ``v`` with timestamp >= ``t``."""
        times = self.times[v]
        lo = np.searchsorted(times, t, side="left")
        return self.nbr[v][lo:], times[lo:]

    def step_table(self, v: int, t: int):
        """Cached ``(neighbours, timestamps, cdf)`` lists for the suffix at ``t``, or ``None``.

        The normalized weights depend only on the suffix (``exp(t)`` cancels),
        so one table per ``(v, suffix start)`` serves every walker time.
        """
        lo = bisect.bisect_left(self._time_lists[v], t)
        key = (v, lo)
        table = self._tables.get(key)
        if table is None:
            nbr, tp = self.nbr[v][lo:], self.times[v][lo:]
            p = transition_probs(tp, t)
            table = None if p is None else (nbr.tolist(), tp.tolist(), np.cumsum(p).tolist())
            self._tables[key] = table
        return table


def temporal_neighborhood(g: DynamicGraph, v: int, t: int) -> set:
    """Set of ``((u, w), t')`` for edges incident to ``v`` with ``t' >= t``."""
    if not 0 <= v < g.node_count:
        raise ValidationError(f"node {v} outside 0..{g.node_count - 1}")
    nbr, times = TemporalAdjacency(g).neighborhood(v, t)
    return {((min(v, int(w)), max(v, int(w))), int(tp)) for w, tp in zip(nbr, times)}


def transition_probs(edge_times, t) -> np.ndarray | None:
    """Normalized ``exp(t - t')`` weights; ``None`` signals a dead end."""
    edge_times = np.asarray(edge_times, dtype=np.float64)
    if edge_times.size == 0:
        return None
    logits = t - edge_times
    w = np.exp(logits - logits.max())
    return w / w.sum()


def next_edge(adj: TemporalAdjacency, v: int, t: int, rng) -> tuple[int, int] | None:
    """Draw one transition from ``v`` at time ``t``; ``None`` at a dead end."""
    table = adj.step_table(v, t)
    if table is None:
        return None
    nbr, tp, cdf = table
    k = min(bisect.bisect_right(cdf, rng.random() * cdf[-1]), len(cdf) - 1)
    return nbr[k], tp[k]


def sample_walk(adj: TemporalAdjacency, start: int, cfg: WalkConfig, rng) -> TemporalWalk | None:
    """One walk from ``start``; ``None`` when rejected (isolated start or too short)."""
    g = adj.graph
    if not 0 <= start < g.node_count:
        raise ValidationError(f"start node {start} outside 0..{g.node_count - 1}")
    if adj.degree(start) == 0:
        return None
    if cfg.start_time_policy == "earliest":
        t = 0
    else:
        t = int(rng.choice(adj.times[start]))
    nodes = [start]
    times = []
    v = start
    while len(nodes) < cfg.l_max:
        step = next_edge(adj, v, t, rng)
        if step is None:
            break
        v, t = step
        nodes.append(v)
        times.append(t)
    if len(nodes) < cfg.min_length:
        return None
    return TemporalWalk(g.graph_id, tuple(nodes), tuple(times))


def walk_rng(seed: int, graph_id: str, node: int, walk_index: int) -> np.random.Generator:
    """Independent stream per (seed, graph, node, walk) so ordering of work never matters."""
    gid = int.from_bytes(hashlib.sha256(graph_id.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, gid, node, walk_index]))


def sample_graph_walks(g: DynamicGraph, cfg: WalkConfig, stats: SamplerStats | None = None) -> list:
    stats = stats if stats is not None else SamplerStats()
    adj = TemporalAdjacency(g)
    walks = []
    if g.n_edges == 0:
        msg = f"graph {g.graph_id} has no edges; no walks sampled"
        log.warning(msg)
        stats.warnings.append(msg)
    for v in range(g.node_count):
        for i in range(cfg.walks_per_node):
            stats.attempted += 1
            if adj.degree(v) == 0:
                stats.rejected_isolated += 1
                continue
            w = sample_walk(adj, v, cfg, walk_rng(cfg.seed, g.graph_id, v, i))
            if w is None:
                stats.rejected_short += 1
            else:
                walks.append(w)
    stats.emitted += len(walks)
    stats.per_graph[g.graph_id] = len(walks)
    return walks


def sample_corpus(graphs, cfg: WalkConfig) -> tuple[list, SamplerStats]:
    if not graphs:
        raise ValidationError("sample_corpus needs at least one graph")
    stats = SamplerStats()
    walks = []
    for g in graphs:
        walks.extend(sample_graph_walks(g, cfg, stats))
    return walks, stats


def check_walk(walk: TemporalWalk, edge_set: set, l_max: int | None = None) -> list[str]:
    """Problems with a walk relative to its graph's ``edge_set``; empty when valid."""
    problems = []
    n = len(walk.nodes)
    if n < 2:
        problems.append("fewer than two nodes")
    if l_max is not None and n > l_max:
        problems.append(f"{n} nodes exceeds l_max={l_max}")
    if len(walk.times) != n - 1:
        problems.append("times must have one entry per transition")
    for i in range(len(walk.times) - 1):
        if walk.times[i] > walk.times[i + 1]:
            problems.append(f"time decreases at step {i}")
    for i, t in enumerate(walk.times[: n - 1]):
        a, b = walk.nodes[i], walk.nodes[i + 1]
        if (min(a, b), max(a, b), t) not in edge_set:
            problems.append(f"({a}, {b}, {t}) is not an edge")
    return problems


# --- walks file ------------------------------------------------------------

def format_walk(walk: TemporalWalk) -> str:
    # the final node repeats the last edge time
    times = list(walk.times) + [walk.times[-1]]
    body = " ".join(f"{v}:{t}" for v, t in zip(walk.nodes, times))
    return f"{walk.graph_id}\t{body}"


def parse_walk_line(line: str, path=None, lineno=None) -> TemporalWalk:
    line = line.rstrip("\n")
    gid, sep, body = line.rpartition("\t")
    if not sep or not gid:
        raise FormatError("expected 'graph_id<TAB>v:t ...'", path, lineno)
    nodes, times = [], []
    for tok in body.split(" "):
        v, colon, t = tok.partition(":")
        if not colon:
            raise FormatError(f"token {tok!r} is not 'node:time'", path, lineno)
        try:
            nodes.append(int(v))
            times.append(int(t))
        except ValueError:
            raise FormatError(f"token {tok!r} is not 'node:time'", path, lineno) from None
    if len(nodes) < 2:
        raise FormatError("walk has fewer than two nodes", path, lineno)
    if times[-1] != times[-2]:
        raise FormatError("last node must repeat the final edge time", path, lineno)
    if any(v < 0 for v in nodes):
        raise FormatError("negative node index", path, lineno)
    return TemporalWalk(gid, tuple(nodes), tuple(times[:-1]))


def write_walks(walks, path, stats: SamplerStats | None = None, cfg: WalkConfig | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for w in walks:
            fh.write(format_walk(w) + "\n")
    if stats is not None:
        doc = {"stats": asdict(stats)}
        if cfg is not None:
            doc["config"] = asdict(cfg)
        with open(str(path) + ".stats.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_walks(path) -> list:
    walks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            walks.append(parse_walk_line(line, path, lineno))
    return walks

