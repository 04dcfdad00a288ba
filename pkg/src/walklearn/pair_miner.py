"""Same/not-same pair mining from face tracks.

Positive pairs come from within a track. Negative pairs come from two rules:

* ``same_frame``: different tracks detected at the same frame index of one ingest file;
* ``cross_region``: samples discretized into different regions whose centroids
  are at least ``min_region_separation_km`` apart.

Sampling is seeded per stream (one stream per track for positives, one for the
negative down-sampling) so results do not depend on iteration order.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from enum import Enum
from itertools import combinations

import numpy as np

RULE_CODES = {"same_track": 0, "same_frame": 1, "cross_region": 2}
_NEG_STREAM = 1_000_003


class Rule(str, Enum):
    SAME_TRACK = "same_track"
    SAME_FRAME = "same_frame"
    CROSS_REGION = "cross_region"


@dataclass(frozen=True)
class Pair:
    a: int
    b: int
    label: int
    rule: Rule

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError(f"pair must be canonical (a < b), got ({self.a}, {self.b})")
        if self.label not in (1, -1) or (self.label == 1) != (self.rule is Rule.SAME_TRACK):
            raise ValueError(f"label {self.label} inconsistent with rule {self.rule}")


@dataclass(frozen=True)
class MiningConfig:
    max_pos_per_track: int = 15
    neg_to_pos_ratio: float = 1.0
    min_region_separation_km: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.max_pos_per_track < 1:
            raise ValueError("max_pos_per_track must be >= 1")
        if not self.neg_to_pos_ratio > 0:
            raise ValueError("neg_to_pos_ratio must be > 0")
        if self.min_region_separation_km < 0:
            raise ValueError("min_region_separation_km must be >= 0")


class PairSet:
    """Columnar pair table sorted by ``(a, b)``."""

    def __init__(self, a, b, label, rule):
        self.a = np.asarray(a, dtype=np.int64)
        self.b = np.asarray(b, dtype=np.int64)
        self.label = np.asarray(label, dtype=np.int64)
        self.rule = np.asarray(rule, dtype=np.int64)

    @classmethod
    def from_pairs(cls, pairs):
        pairs = sorted(pairs, key=lambda p: (p.a, p.b))
        return cls([p.a for p in pairs], [p.b for p in pairs], [p.label for p in pairs],
                   [RULE_CODES[p.rule.value] for p in pairs])

    def __len__(self):
        return len(self.a)

    def __iter__(self):
        names = list(RULE_CODES)
        for a, b, y, r in zip(self.a, self.b, self.label, self.rule):
            yield Pair(int(a), int(b), int(y), Rule(names[r]))

    def __eq__(self, other):
        return isinstance(other, PairSet) and self.to_csv() == other.to_csv()

    @property
    def n_u(self):
        return len(self)

    def stats(self):
        n = len(self)
        return {
            "n_pairs": n,
            "positive": int(np.sum(self.label == 1)),
            "negative": int(np.sum(self.label == -1)),
            "positive_fraction": round(float(np.mean(self.label == 1)), 6) if n else 0.0,
            "same_track": int(np.sum(self.rule == 0)),
            "same_frame": int(np.sum(self.rule == 1)),
            "cross_region": int(np.sum(self.rule == 2)),
        }

    def to_csv(self):
        names = list(RULE_CODES)
        buf = io.StringIO()
        buf.write("a,b,label,rule\n")
        for a, b, y, r in zip(self.a, self.b, self.label, self.rule):
            buf.write(f"{a},{b},{y},{names[r]}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        lines = text.strip().splitlines()
        if not lines or lines[0].strip() != "a,b,label,rule":
            raise ValueError("pair CSV must start with header a,b,label,rule")
        rows = [ln.split(",") for ln in lines[1:]]
        try:
            return cls([int(r[0]) for r in rows], [int(r[1]) for r in rows],
                       [int(r[2]) for r in rows], [RULE_CODES[r[3]] for r in rows])
        except (IndexError, KeyError, ValueError) as exc:
            raise ValueError(f"malformed pair row: {exc}") from None


def _choose(rng, n_items, k):
    """Indices of ``k`` items drawn without replacement, returned sorted."""
    return np.sort(rng.choice(n_items, size=k, replace=False))


def mine_positive_pairs(store, cfg):
    out = []
    for tid, track in store.tracks.items():
        ids = sorted(track.sample_ids)
        combos = list(combinations(ids, 2))
        if len(combos) > cfg.max_pos_per_track:
            rng = np.random.default_rng([cfg.seed, tid])
            combos = [combos[i] for i in _choose(rng, len(combos), cfg.max_pos_per_track)]
        out.extend(Pair(a, b, 1, Rule.SAME_TRACK) for a, b in combos)
    return out


def negative_candidates(store, cfg, regions):
    """All rule-(i)/(ii) negatives before down-sampling, as sorted code arrays.

    Returns ``(a, b, rule)`` arrays ordered by ``(a, b)``; a pair matching both
    rules is tagged ``same_frame``.
    """
    n = len(store)
    if n < 2:
        return (np.zeros(0, np.int64),) * 3
    sid = store.sample_ids
    codes, rules = [], []

    # rule (i): same frame, different track
    order = np.argsort(store.frame_index, kind="stable")
    frames = store.frame_index[order]
    cuts = np.flatnonzero(np.diff(frames)) + 1
    for grp in np.split(order, cuts):
        if len(grp) < 2:
            continue
        i, j = np.triu_indices(len(grp), k=1)
        gi, gj = grp[i], grp[j]
        keep = store.track_ids[gi] != store.track_ids[gj]
        a = np.minimum(sid[gi[keep]], sid[gj[keep]])
        b = np.maximum(sid[gi[keep]], sid[gj[keep]])
        codes.append(a * (2 ** 31) + b)
        rules.append(np.full(len(a), RULE_CODES["same_frame"]))

    # rule (ii): far-apart discretized regions
    geo = store.geo_labels(regions)
    members = {r: np.flatnonzero(geo == r) for r in range(len(regions))}
    for r1 in range(len(regions)):
        for r2 in range(r1 + 1, len(regions)):
            if not len(members[r1]) or not len(members[r2]):
                continue
            if regions.separation_km(r1, r2) < cfg.min_region_separation_km:
                continue
            s1 = sid[members[r1]][:, None]
            s2 = sid[members[r2]][None, :]
            a = np.minimum(s1, s2).ravel()
            b = np.maximum(s1, s2).ravel()
            codes.append(a * (2 ** 31) + b)
            rules.append(np.full(len(a), RULE_CODES["cross_region"]))

    if not codes:
        return (np.zeros(0, np.int64),) * 3
    codes = np.concatenate(codes)
    rules = np.concatenate(rules)
    # lexsort on (rule, code): the first occurrence of each code has the lowest rule code
    idx = np.lexsort((rules, codes))
    codes, rules = codes[idx], rules[idx]
    first = np.concatenate([[True], codes[1:] != codes[:-1]])
    codes, rules = codes[first], rules[first]
    return codes // (2 ** 31), codes % (2 ** 31), rules


def downsample_target(n_candidates, n_positive, ratio):
    return min(n_candidates, math.ceil(ratio * n_positive))


def mine_negative_pairs(store, cfg, regions, n_positive=None):
    if n_positive is None:
        n_positive = len(mine_positive_pairs(store, cfg))
    a, b, rules = negative_candidates(store, cfg, regions)
    target = downsample_target(len(a), n_positive, cfg.neg_to_pos_ratio)
    if target < len(a):
        keep = _choose(np.random.default_rng([cfg.seed, _NEG_STREAM]), len(a), target)
        a, b, rules = a[keep], b[keep], rules[keep]
    names = list(RULE_CODES)
    return [Pair(int(x), int(y), -1, Rule(names[r])) for x, y, r in zip(a, b, rules)]


def mine_pairs(store, cfg, regions):
    """Positives plus negatives, deduplicated (positive wins) and sorted by ``(a, b)``."""
    if len(store) < 2:
        return PairSet([], [], [], [])
    pos = mine_positive_pairs(store, cfg)
    neg = mine_negative_pairs(store, cfg, regions, n_positive=len(pos))
    merged = {(p.a, p.b): p for p in neg}
    merged.update({(p.a, p.b): p for p in pos})
    return PairSet.from_pairs(merged.values())
