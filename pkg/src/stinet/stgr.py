"""Global refinement over the LR+HR feature sequence with a GraphSAGE graph.

Node ordering: LR nodes ``0..S-1`` by time, then HR nodes ``S..2S-1``.
When only one level is present the graph has ``S`` nodes of that level.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

ATTRIBUTES = ("EF", "EP", "ET")


@dataclass
class FeatureGraph:
    node_features: torch.Tensor  # (B, N, c)
    times: torch.Tensor  # (N,)
    levels: list[str]  # per node, "lr" | "hr"
    frame_index: list[int]  # per node, position in its sequence
    edges: torch.Tensor  # (E, 2) undirected, i < j
    edge_attrs: torch.Tensor | None = None  # (B, E, 3): EF, EP, ET

    @property
    def num_nodes(self) -> int:
        return len(self.levels)


def pool_node_features(L: torch.Tensor | None, H: torch.Tensor | None) -> torch.Tensor:
    """Global average pooling of ``(B, S, c, h, w)`` sequences to ``(B, N, c)``."""
    return torch.cat([seq.mean(dim=(-2, -1)) for seq in (L, H) if seq is not None], dim=1)


def graph_edges(S: int, levels: tuple[str, ...] = ("lr", "hr")) -> tuple[list[str], list[int], torch.Tensor]:
    """Counterpart edges (same frame, LR-HR) plus all same-level pairs."""
    node_levels = [lvl for lvl in levels for _ in range(S)]
    frame_index = [s for _ in levels for s in range(S)]
    edges = []
    N = len(node_levels)
    for i in range(N):
        for j in range(i + 1, N):
            same_level = node_levels[i] == node_levels[j]
            counterpart = not same_level and frame_index[i] == frame_index[j]
            if same_level or counterpart:
                edges.append((i, j))
    return node_levels, frame_index, torch.tensor(edges, dtype=torch.long).view(-1, 2)


def build_graph(L: torch.Tensor | None, H: torch.Tensor | None, times=None) -> FeatureGraph:
    ref = L if L is not None else H
    if L is not None and H is not None and L.shape[:3] != H.shape[:3]:
        raise ValueError(f"sequence mismatch: {tuple(L.shape)} vs {tuple(H.shape)}")
    S = ref.shape[1]
    levels = tuple(lvl for lvl, seq in (("lr", L), ("hr", H)) if seq is not None)
    node_levels, frame_index, edges = graph_edges(S, levels)
    if times is None:
        times = torch.arange(S, dtype=ref.dtype)
    times = torch.as_tensor(times, dtype=ref.dtype, device=ref.device)
    return FeatureGraph(
        node_features=pool_node_features(L, H),
        times=times[frame_index],
        levels=node_levels,
        frame_index=frame_index,
        edges=edges.to(ref.device),
    )


def cosine(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cosine similarity with the convention cos = 0 when either vector is zero."""
    denom = a.norm(dim=dim) * b.norm(dim=dim)
    dot = (a * b).sum(dim=dim)
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    return torch.where(denom > 0, dot / safe, torch.zeros_like(dot))


def temporal_closeness(dt: torch.Tensor) -> torch.Tensor:
    return 1 - torch.sigmoid(dt.abs())


def edge_attributes(graph: FeatureGraph, L: torch.Tensor | None, H: torch.Tensor | None) -> torch.Tensor:
    """(B, E, 3) triplets: frame-level cosine, mean pixel-level cosine, temporal closeness.

    Pixel-level similarity of an LR-HR pair is taken on the LR grid after
    bilinear 4x downsampling of the HR feature; same-level pairs use their
    native grid.
    """
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    nf = graph.node_features
    e_f = cosine(nf[:, i], nf[:, j])

    seqs = {"lr": L, "hr": H}
    fi = torch.tensor(graph.frame_index, device=graph.edges.device)
    lv = graph.levels
    e_p = torch.zeros_like(e_f)
    kinds = [(lv[a], lv[b]) for a, b in graph.edges.tolist()]
    for kind in set(kinds):
        sel = torch.tensor([k == kind for k in kinds], device=e_f.device)
        a, b = seqs[kind[0]][:, fi[i[sel]]], seqs[kind[1]][:, fi[j[sel]]]
        if kind[0] != kind[1]:
            a, b = _to_lr_grid(a, b)
        e_p[:, sel] = cosine(a, b, dim=2).mean(dim=(-2, -1))

    e_t = temporal_closeness(graph.times[i] - graph.times[j]).expand_as(e_f)
    return torch.stack([e_f, e_p, e_t], dim=-1)


def _to_lr_grid(a, b):
    """Bring the larger of an LR/HR pair of (B, E, c, h, w) stacks onto the smaller grid."""
    small, big = (a, b) if a.shape[-1] < b.shape[-1] else (b, a)
    B, E, c, h, w = big.shape
    down = F.interpolate(big.reshape(B * E, c, h, w), size=small.shape[-2:], mode="bilinear",
                         align_corners=False).view(B, E, c, *small.shape[-2:])
    return (small, down) if a is small else (down, small)


class EdgeWeight(nn.Module):
    """Scalar edge weight softplus(w . E + b); ablated attributes are masked out."""

    def __init__(self, use: dict[str, bool] | None = None):
        super().__init__()
        use = use or {}
        self.register_buffer("mask", torch.tensor([float(use.get(k, True)) for k in ATTRIBUTES]))
        self.linear = nn.Linear(3, 1)
        nn.init.ones_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, attrs: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.linear(attrs * self.mask)).squeeze(-1)


def aggregation_matrix(edges: torch.Tensor, weights: torch.Tensor, num_nodes: int) -> torch.Tensor:
    """Dense (B, N, N) row-normalised weights; rows with zero total weight stay zero."""
    B = weights.shape[0]
    A = weights.new_zeros(B, num_nodes, num_nodes)
    A[:, edges[:, 0], edges[:, 1]] = weights
    A[:, edges[:, 1], edges[:, 0]] = weights
    total = A.sum(-1, keepdim=True)
    return torch.where(total > 0, A / torch.where(total > 0, total, torch.ones_like(total)), torch.zeros_like(A))


class SAGELayer(nn.Module):
    """h_i' = W [h_i || sum_j a_ij h_j] with ``a`` the normalised edge weights."""

    def __init__(self, c: int, zero_init: bool = False):
        super().__init__()
        self.linear = nn.Linear(2 * c, c)
        if zero_init:
            nn.init.zeros_(self.linear.weight)
            nn.init.zeros_(self.linear.bias)

    def forward(self, h, A):
        return self.linear(torch.cat([h, A @ h], dim=-1))


class GlobalRefine(nn.Module):
    def __init__(self, c: int = 64, layers: int = 4, edge: dict[str, bool] | None = None):
        super().__init__()
        self.edge_weight = EdgeWeight(edge)
        self.layers = nn.ModuleList([SAGELayer(c, zero_init=(k == layers - 1)) for k in range(layers)])

    def refine(self, graph: FeatureGraph, edge_weights: torch.Tensor | None = None) -> torch.Tensor:
        """Message passing over ``graph``; returns (B, N, c) node outputs.

        ``edge_weights`` (B, E) overrides the learned weights.
        """
        if edge_weights is None:
            edge_weights = self.edge_weight(graph.edge_attrs)
        A = aggregation_matrix(graph.edges, edge_weights, graph.num_nodes)
        h = graph.node_features
        for k, layer in enumerate(self.layers):
            h = layer(h, A)
            if k < len(self.layers) - 1:
                h = F.leaky_relu(h, 0.1)
        return h

    def forward(self, L, H, times=None):
        graph = build_graph(L, H, times)
        graph.edge_attrs = edge_attributes(graph, L, H)
        return modulate_features(self.refine(graph), L, H)


def graphsage_refine(module: GlobalRefine, graph: FeatureGraph, edge_weights=None) -> torch.Tensor:
    return module.refine(graph, edge_weights)


def modulate_features(node_outputs: torch.Tensor, L: torch.Tensor | None, H: torch.Tensor | None):
    """F^G = F + v * F with v broadcast over the spatial positions."""
    out, start = [], 0
    for seq in (L, H):
        if seq is None:
            out.append(None)
            continue
        S = seq.shape[1]
        v = node_outputs[:, start:start + S, :, None, None]
        out.append(seq + v * seq)
        start += S
    return tuple(out)


def dump_graph(graph: FeatureGraph, path: str | Path, batch_index: int = 0) -> None:
    """Edge list text: ``i j level_i level_j t_i t_j EF EP ET`` per line."""
    lines = ["# i j level_i level_j t_i t_j EF EP ET"]
    attrs = graph.edge_attrs[batch_index] if graph.edge_attrs is not None else None
    for e, (i, j) in enumerate(graph.edges.tolist()):
        row = [str(i), str(j), graph.levels[i], graph.levels[j],
               f"{graph.times[i].item():g}", f"{graph.times[j].item():g}"]
        if attrs is not None:
            row += [f"{v:.6f}" for v in attrs[e].tolist()]
        lines.append(" ".join(row))
    Path(path).write_text("\n".join(lines) + "\n")
