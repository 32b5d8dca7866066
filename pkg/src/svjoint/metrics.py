"""Detection accuracy against ground truth, and cross-run stability."""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["ConfusionCounts", "confusion", "metrics", "jaccard"]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(selected, gene_ids, sv_flags) -> ConfusionCounts:
    """Standard confusion counts of a selected gene set against truth flags."""
    universe = set(gene_ids)
    selected = set(selected)
    unknown = selected - universe
    if unknown:
        raise ValueError(f"selected genes not in truth universe: {sorted(unknown)[:5]}")
    tp = fp = tn = fn = 0
    for gid, is_sv in zip(gene_ids, sv_flags):
        picked = gid in selected
        if picked and is_sv:
            tp += 1
        elif picked:
            fp += 1
        elif is_sv:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def metrics(c: ConfusionCounts):
    """(TPR, FPR, F1) with the 0/0 -> 0 convention."""
    tpr = c.tp / (c.tp + c.fn) if (c.tp + c.fn) else 0.0
    fpr = c.fp / (c.fp + c.tn) if (c.fp + c.tn) else 0.0
    denom = 2 * c.tp + c.fp + c.fn
    f1 = 2 * c.tp / denom if denom else 0.0
    return tpr, fpr, f1


def jaccard(set_a, set_b) -> float:
    """|intersection| / |union|; two empty sets count as identical (1)."""
    a, b = set(set_a), set(set_b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)
