"""Independent reference implementations used as test oracles.

These deliberately re-derive behavior from first principles (explicit loops,
no shared helpers with the package) so that agreement with the package is a
real check, not a tautology.
"""

from __future__ import annotations


def ref_base_ids(codes_sorted: list[str]) -> dict[str, int]:
    return {c: 5 + i for i, c in enumerate(codes_sorted)}


def ref_apply_one_merge(seq: list[int], left: int, right: int, result: int) -> list[int]:
    out = []
    i = 0
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == left and seq[i + 1] == right:
            out.append(result)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def ref_encode_visit(codes: list[str], code_to_id: dict[str, int],
                     merges: list[tuple[int, int, int]]) -> list[int]:
    """Naive reference encoder: map codes to ids, replay merges in order."""
    seq = [code_to_id.get(c, 1) for c in codes]
    for left, right, result in merges:
        seq = ref_apply_one_merge(seq, left, right, result)
    return seq


def ref_count_pairs(segments: list[list[int]]) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for seg in segments:
        for i in range(len(seg) - 1):
            pair = (seg[i], seg[i + 1])
            counts[pair] = counts.get(pair, 0) + 1
    return counts


def ref_best_pair(counts: dict[tuple[int, int], int]) -> tuple[tuple[int, int], int]:
    """Argmax by count, ties by smaller left id then smaller right id."""
    best = None
    best_key = None
    for (l, r), c in counts.items():
        key = (-c, l, r)
        if best_key is None or key < best_key:
            best_key = key
            best = ((l, r), c)
    return best


def ref_train_trace(visit_codes: list[list[str]], codes_sorted: list[str],
                    n_merges: int, min_pair_freq: int) -> list[tuple[int, int, int]]:
    """Re-derive the whole merge sequence by recounting from scratch each step."""
    code_to_id = ref_base_ids(codes_sorted)
    merges: list[tuple[int, int, int]] = []
    next_id = 5 + len(codes_sorted)
    for _ in range(n_merges):
        segments = [ref_encode_visit(v, code_to_id, merges) for v in visit_codes]
        counts = ref_count_pairs(segments)
        if not counts:
            break
        (l, r), c = ref_best_pair(counts)
        if c < min_pair_freq:
            break
        merges.append((l, r, next_id))
        next_id += 1
    return merges


def ref_auroc_pairs(scores: list[float], labels: list[int]) -> float:
    """O(n^2) pair counting: concordant pairs plus half of ties."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                total += 1.0
            elif sp == sn:
                total += 0.5
    return total / (len(pos) * len(neg))
