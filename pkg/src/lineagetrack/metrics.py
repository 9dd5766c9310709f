"""Lineage evaluation: AOGM graph-edit cost, TRA, and SEG.

Tracking results are acyclic oriented graphs: one node per (frame, mask),
migration edges inside tracklets, parent edges across a division. The AOGM
cost is a weighted sum of node errors (splits NS, false negatives FN, false
positives FP) and edge errors (redundant ED, missing EA, wrong-semantics EC)
against a reference graph; TRA = 1 - min(AOGM, AOGM_0)/AOGM_0 where AOGM_0 is
the cost of building the reference from nothing. SEG is the mean Jaccard index
over reference masks, counting a computed mask only when it covers more than
half of the reference mask. The same >50% rule matches nodes for AOGM (noted
in every report).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .model import DetectionSet, LineageForest

Node = tuple[int, int]  # (t, label)


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class AogmWeights:
    w_ns: float = 5.0
    w_fn: float = 10.0
    w_fp: float = 1.0
    w_ed: float = 1.0
    w_ea: float = 1.5
    w_ec: float = 1.0

    def __post_init__(self):
        for name in ("w_ns", "w_fn", "w_fp", "w_ed", "w_ea", "w_ec"):
            if getattr(self, name) < 0:
                raise MetricsError(f"{name} must be non-negative")


@dataclass(frozen=True)
class AogmBreakdown:
    ns: int
    fn: int
    fp: int
    ed: int
    ea: int
    ec: int
    total: float
    aogm0: float


def lineage_graph(forest: LineageForest) -> tuple[set[Node], dict[tuple[Node, Node], str]]:
    """Nodes and directed edges of a forest; edge values are "migration" or "parent"."""
    nodes: set[Node] = set()
    edges: dict[tuple[Node, Node], str] = {}
    for tr in forest.tracklets.values():
        refs = list(tr.mask_refs)
        nodes.update(refs)
        for a, b in zip(refs, refs[1:]):
            edges[(a, b)] = "migration"
        if tr.parent is not None and tr.parent in forest.tracklets:
            p = forest.tracklets[tr.parent]
            edges[(p.mask_refs[-1], refs[0])] = "parent"
    return nodes, edges


def match_nodes(ref: Sequence[DetectionSet], comp: Sequence[DetectionSet]
                ) -> dict[Node, frozenset[Node]]:
    """Map each computed node to the reference nodes it covers by more than half.

    A computed mask matches reference mask R iff |comp ∩ R| > 0.5 |R|; the rule
    guarantees every reference node is claimed by at most one computed node.
    """
    if len(ref) != len(comp):
        raise MetricsError("reference and computed frame ranges differ")
    out: dict[Node, frozenset[Node]] = {}
    for t, (rset, cset) in enumerate(zip(ref, comp)):
        overlap_issues = cset.validate_disjoint()
        if overlap_issues:
            raise MetricsError(f"computed masks overlap: {overlap_issues[0]}")
        for cl, cm in cset.masks.items():
            hits = []
            for rl, rm in rset.masks.items():
                if cm.intersection_count(rm) * 2 > rm.area:
                    hits.append((t, rl))
            if hits:
                out[(t, cl)] = frozenset(hits)
    return out


def aogm(ref_forest: LineageForest, comp_forest: LineageForest,
         matching: dict[Node, frozenset[Node]], w: AogmWeights) -> AogmBreakdown:
    """Weighted graph-edit error counts of a computed forest against a reference.

    NS counts the splits needed for computed nodes covering k >= 2 reference
    nodes (k - 1 each); FN/FP are unmatched reference/computed nodes. A
    reference edge with no counterpart under the matching is EA; a counterpart
    with the wrong kind (migration vs parent) is EC; computed edges with no
    reference counterpart are ED.
    """
    ref_nodes, ref_edges = lineage_graph(ref_forest)
    comp_nodes, comp_edges = lineage_graph(comp_forest)

    matched: dict[Node, frozenset[Node]] = {}
    comp_of_ref: dict[Node, Node] = {}
    for v in comp_nodes:
        refs = frozenset(r for r in matching.get(v, frozenset()) if r in ref_nodes)
        matched[v] = refs
        for r in refs:
            comp_of_ref[r] = v

    ns = sum(len(refs) - 1 for refs in matched.values() if len(refs) >= 2)
    fn = sum(1 for r in ref_nodes if r not in comp_of_ref)
    fp = sum(1 for v in comp_nodes if not matched[v])

    ea = ec = 0
    covered_comp_edges: set[tuple[Node, Node]] = set()
    for (a, b), kind in ref_edges.items():
        u, v = comp_of_ref.get(a), comp_of_ref.get(b)
        if u is None or v is None or (u, v) not in comp_edges:
            ea += 1
            continue
        covered_comp_edges.add((u, v))
        if comp_edges[(u, v)] != kind:
            ec += 1
    # Each reference node is matched by at most one computed node, so a computed
    # edge has a reference counterpart exactly when some reference edge induced it.
    ed = sum(1 for e in comp_edges if e not in covered_comp_edges)

    total = (w.w_ns * ns + w.w_fn * fn + w.w_fp * fp
             + w.w_ed * ed + w.w_ea * ea + w.w_ec * ec)
    aogm0 = w.w_fn * len(ref_nodes) + w.w_ea * len(ref_edges)
    return AogmBreakdown(ns=ns, fn=fn, fp=fp, ed=ed, ea=ea, ec=ec,
                         total=total, aogm0=aogm0)


def tra(ref_dsets: Sequence[DetectionSet], ref_forest: LineageForest,
        comp_dsets: Sequence[DetectionSet], comp_forest: LineageForest,
        w: Optional[AogmWeights] = None) -> float:
    """Normalized tracking accuracy: 1 - min(AOGM, AOGM_0) / AOGM_0."""
    w = w or AogmWeights()
    matching = match_nodes(ref_dsets, comp_dsets)
    b = aogm(ref_forest, comp_forest, matching, w)
    if b.aogm0 <= 0:
        raise MetricsError("empty reference graph")
    return 1.0 - min(b.total, b.aogm0) / b.aogm0


def seg(ref_dsets: Sequence[DetectionSet], comp_dsets: Sequence[DetectionSet]) -> float:
    """Mean Jaccard index over all reference masks, zero when unmatched.

    A computed mask S counts for reference mask R only if |R ∩ S| > 0.5 |R|.
    """
    if len(ref_dsets) != len(comp_dsets):
        raise MetricsError("reference and computed frame ranges differ")
    scores = []
    for rset, cset in zip(ref_dsets, comp_dsets):
        for rm in rset.masks.values():
            j = 0.0
            for cm in cset.masks.values():
                inter = rm.intersection_count(cm)
                if inter * 2 > rm.area:
                    j = inter / (rm.area + cm.area - inter)
                    break
            scores.append(j)
    if not scores:
        raise MetricsError("no reference masks to score")
    return float(sum(scores) / len(scores))


@dataclass(frozen=True)
class Report:
    tra: float
    seg: Optional[float]
    breakdown: AogmBreakdown
    weights: AogmWeights
    notes: tuple[str, ...] = field(default_factory=tuple)

    @property
    def aogm_edges(self) -> float:
        """AOGM restricted to edge errors (link quality only)."""
        b, w = self.breakdown, self.weights
        return w.w_ed * b.ed + w.w_ea * b.ea + w.w_ec * b.ec

    def to_dict(self) -> dict:
        b, w = self.breakdown, self.weights
        out = {
            "TRA": self.tra,
            "SEG": self.seg,
            "AOGM": b.total,
            "AOGM0": b.aogm0,
            "AOGM_EDGES": self.aogm_edges,
            "NS": b.ns, "FN": b.fn, "FP": b.fp,
            "ED": b.ed, "EA": b.ea, "EC": b.ec,
            "weights.w_ns": w.w_ns, "weights.w_fn": w.w_fn, "weights.w_fp": w.w_fp,
            "weights.w_ed": w.w_ed, "weights.w_ea": w.w_ea, "weights.w_ec": w.w_ec,
            "notes": list(self.notes),
        }
        return out

    def to_text(self) -> str:
        lines = []
        for key, val in self.to_dict().items():
            if key == "notes":
                continue
            if isinstance(val, float):
                lines.append(f"{key}={val:.6f}")
            else:
                lines.append(f"{key}={val}")
        for note in self.notes:
            lines.append(f"note={note}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def evaluate(ref_dsets: Sequence[DetectionSet], ref_forest: LineageForest,
             comp_dsets: Sequence[DetectionSet], comp_forest: LineageForest,
             w: Optional[AogmWeights] = None, with_seg: bool = True) -> Report:
    w = w or AogmWeights()
    matching = match_nodes(ref_dsets, comp_dsets)
    b = aogm(ref_forest, comp_forest, matching, w)
    if b.aogm0 <= 0:
        raise MetricsError("empty reference graph")
    tra_value = 1.0 - min(b.total, b.aogm0) / b.aogm0
    seg_value = seg(ref_dsets, comp_dsets) if with_seg else None
    return Report(tra=tra_value, seg=seg_value, breakdown=b, weights=w,
                  notes=("node matching uses the >50%-of-reference overlap rule",))
