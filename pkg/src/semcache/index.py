"""Vector indexes for candidate selection.

ExactCosineIndex scans a dense matrix; SmallWorldIndex keeps a layered
proximity graph so lookups stay sublinear at larger element counts.
Both speak the same contract: normalized vectors in, candidates out,
ordered by descending similarity with ascending-id tie breaks, and the
similarity attached to every candidate is an exactly computed cosine.
"""

from __future__ import annotations

import heapq
import math
import random
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

_EXACT_FALLBACK_MAX = 64
_NORM_TOL = 1e-6


@dataclass(frozen=True)
class Candidate:
    id: int
    similarity: float


def _check_vector(vec, dimension: int) -> np.ndarray:
    arr = np.asarray(vec.components if hasattr(vec, "components") else vec, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != dimension:
        raise ValidationError(f"expected dimension {dimension}, got shape {arr.shape}")
    n = float(np.linalg.norm(arr))
    if abs(n - 1.0) > _NORM_TOL:
        raise ValidationError(f"vector is not L2-normalized (norm={n:.8f})")
    return arr


def _rank(ids: np.ndarray, sims: np.ndarray, k: int, min_similarity: float) -> list[Candidate]:
    keep = sims >= min_similarity
    ids, sims = ids[keep], sims[keep]
    order = np.lexsort((ids, -sims))[:k]
    return [Candidate(int(ids[i]), float(sims[i])) for i in order]


class ExactCosineIndex:
    """Brute-force cosine index. The correctness oracle for the graph index."""

    SNAPSHOT_MAGIC = "exact-cosine-index"

    def __init__(self, dimension: int, seed: int = 1):
        if dimension < 1:
            raise ValidationError("dimension must be >= 1")
        self.dimension = dimension
        self.seed = seed
        self._lock = threading.Lock()
        self._ids: list[int] = []
        self._pos: dict[int, int] = {}
        self._vecs = np.empty((0, dimension), dtype=np.float64)

    def __len__(self) -> int:
        return len(self._ids)

    def ids(self) -> list[int]:
        with self._lock:
            return list(self._ids)

    def insert(self, id: int, vector) -> None:
        arr = _check_vector(vector, self.dimension)
        with self._lock:
            if id in self._pos:
                raise ValidationError(f"duplicate id {id}")
            self._pos[id] = len(self._ids)
            self._ids.append(id)
            self._vecs = np.vstack([self._vecs, arr[None, :]])

    def remove(self, id: int) -> None:
        with self._lock:
            if id not in self._pos:
                raise ValidationError(f"unknown id {id}")
            pos = self._pos.pop(id)
            last = len(self._ids) - 1
            if pos != last:
                moved = self._ids[last]
                self._ids[pos] = moved
                self._vecs[pos] = self._vecs[last]
                self._pos[moved] = pos
            self._ids.pop()
            self._vecs = self._vecs[:last]

    def query(self, vector, k: int, min_similarity: float = -1.0) -> list[Candidate]:
        arr = _check_vector(vector, self.dimension)
        if k < 1:
            raise ValidationError("k must be >= 1")
        with self._lock:
            if not self._ids:
                return []
            sims = self._vecs @ arr
            return _rank(np.asarray(self._ids), sims, k, min_similarity)

    def snapshot_lines(self) -> list[str]:
        with self._lock:
            return snapshot_to_lines(self.SNAPSHOT_MAGIC, self.dimension, self.seed,
                                     zip(self._ids, self._vecs))

    def save(self, path: str) -> None:
        lines = self.snapshot_lines()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str) -> "ExactCosineIndex":
        dimension, seed, entries = _read_snapshot(path, cls.SNAPSHOT_MAGIC)
        idx = cls(dimension, seed=seed)
        for id_, vec in entries:
            idx.insert(id_, vec)
        return idx


class SmallWorldIndex:
    """Layered small-world graph with greedy beam search.

    Inserts assign each node a geometric level; search descends from the
    top layer and widens to a beam at the bottom. Removals tombstone the
    node (still traversable, never returned) and the graph is rebuilt
    once tombstones pile up. Small populations short-circuit to a linear
    scan, which doubles as the exactness escape hatch.
    """

    SNAPSHOT_MAGIC = "small-world-index"

    def __init__(self, dimension: int, seed: int = 1, m: int = 16,
                 ef_construction: int = 100, ef_search: int = 1600):
        if dimension < 1:
            raise ValidationError("dimension must be >= 1")
        if m < 2:
            raise ValidationError("m must be >= 2")
        self.dimension = dimension
        self.seed = seed
        self.m = m
        self.m0 = 2 * m
        self.ef_construction = max(ef_construction, m)
        self.ef_search = ef_search
        self._mult = 1.0 / math.log(m)
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._ids: list[int] = []           # slot -> external id
        self._pos: dict[int, int] = {}      # external id -> slot
        self._vecs = np.empty((0, dimension), dtype=np.float64)
        self._levels: list[int] = []
        self._links: list[list[list[int]]] = []  # slot -> level -> neighbor slots
        self._dead: set[int] = set()
        self._entry: int | None = None
        self._top_level = -1

    def __len__(self) -> int:
        return len(self._ids) - len(self._dead)

    def ids(self) -> list[int]:
        with self._lock:
            return [i for i in self._ids if self._pos.get(i) not in self._dead]

    # -------- graph internals --------

    def _search_layer(self, q: np.ndarray, entries: list[tuple[float, int]],
                      ef: int, level: int) -> list[tuple[float, int]]:
        visited = {slot for _, slot in entries}
        cand = [(-s, slot) for s, slot in entries]
        heapq.heapify(cand)
        best = list(entries)
        heapq.heapify(best)
        while cand:
            neg, slot = heapq.heappop(cand)
            if len(best) >= ef and -neg < best[0][0]:
                break
            nbrs = [n for n in self._links[slot][level] if n not in visited]
            if not nbrs:
                continue
            visited.update(nbrs)
            sims = self._vecs[nbrs] @ q
            for s, n in zip(sims.tolist(), nbrs):
                if len(best) < ef or s > best[0][0]:
                    heapq.heappush(cand, (-s, n))
                    heapq.heappush(best, (s, n))
                    if len(best) > ef:
                        heapq.heappop(best)
        return best

    def _greedy_descend(self, q: np.ndarray, from_level: int, to_level: int) -> tuple[float, int]:
        slot = self._entry
        sim = float(self._vecs[slot] @ q)
        for level in range(from_level, to_level, -1):
            improved = True
            while improved:
                improved = False
                nbrs = self._links[slot][level]
                if not nbrs:
                    break
                sims = self._vecs[nbrs] @ q
                j = int(np.argmax(sims))
                if sims[j] > sim:
                    sim = float(sims[j])
                    slot = nbrs[j]
                    improved = True
        return sim, slot

    def _select(self, ranked: list[tuple[float, int]], cap: int) -> list[int]:
        return [slot for _, slot in heapq.nlargest(cap, ranked)]

    def _link(self, slot: int, nbrs: list[int], level: int) -> None:
        cap = self.m0 if level == 0 else self.m
        self._links[slot][level] = list(nbrs)
        for n in nbrs:
            lst = self._links[n][level]
            lst.append(slot)
            if len(lst) > cap:
                sims = self._vecs[lst] @ self._vecs[n]
                order = np.argsort(-sims)[:cap]
                self._links[n][level] = [lst[i] for i in order]

    def _insert_slot(self, slot: int) -> None:
        q = self._vecs[slot]
        level = self._levels[slot]
        if self._entry is None:
            self._entry = slot
            self._top_level = level
            return
        if level < self._top_level:
            sim, ep = self._greedy_descend(q, self._top_level, level)
        else:
            ep = self._entry
            sim = float(self._vecs[ep] @ q)
        entries = [(sim, ep)]
        for lev in range(min(level, self._top_level), -1, -1):
            found = self._search_layer(q, entries, self.ef_construction, lev)
            cap = self.m0 if lev == 0 else self.m
            self._link(slot, self._select(found, cap), lev)
            entries = found
        if level > self._top_level:
            self._entry = slot
            self._top_level = level

    # -------- public API --------

    def insert(self, id: int, vector) -> None:
        arr = _check_vector(vector, self.dimension)
        with self._lock:
            if id in self._pos and self._pos[id] not in self._dead:
                raise ValidationError(f"duplicate id {id}")
            if id in self._pos:
                raise ValidationError(f"id {id} is tombstoned; rebuild before reuse")
            slot = len(self._ids)
            self._ids.append(id)
            self._pos[id] = slot
            self._vecs = np.vstack([self._vecs, arr[None, :]])
            level = int(-math.log(max(self._rng.random(), 1e-12)) * self._mult)
            self._levels.append(level)
            self._links.append([[] for _ in range(level + 1)])
            self._insert_slot(slot)

    def remove(self, id: int) -> None:
        with self._lock:
            slot = self._pos.get(id)
            if slot is None or slot in self._dead:
                raise ValidationError(f"unknown id {id}")
            self._dead.add(slot)
            live = len(self._ids) - len(self._dead)
            if len(self._dead) > max(_EXACT_FALLBACK_MAX, live // 4):
                self._rebuild()

    def _rebuild(self) -> None:
        pairs = [(self._ids[s], self._vecs[s]) for s in range(len(self._ids))
                 if s not in self._dead]
        self._ids, self._pos = [], {}
        self._vecs = np.empty((0, self.dimension), dtype=np.float64)
        self._levels, self._links = [], []
        self._dead = set()
        self._entry, self._top_level = None, -1
        if pairs:
            vecs = np.stack([v for _, v in pairs])
            for i, (id_, _) in enumerate(pairs):
                slot = len(self._ids)
                self._ids.append(id_)
                self._pos[id_] = slot
                level = int(-math.log(max(self._rng.random(), 1e-12)) * self._mult)
                self._levels.append(level)
                self._links.append([[] for _ in range(level + 1)])
            self._vecs = vecs
            for slot in range(len(self._ids)):
                self._insert_slot(slot)

    def query(self, vector, k: int, min_similarity: float = -1.0) -> list[Candidate]:
        arr = _check_vector(vector, self.dimension)
        if k < 1:
            raise ValidationError("k must be >= 1")
        with self._lock:
            live = len(self._ids) - len(self._dead)
            if live == 0:
                return []
            if live <= _EXACT_FALLBACK_MAX:
                slots = [s for s in range(len(self._ids)) if s not in self._dead]
                sims = self._vecs[slots] @ arr
                ids = np.asarray([self._ids[s] for s in slots])
                return _rank(ids, sims, k, min_similarity)
            ef = max(self.ef_search, k)
            sim, ep = self._greedy_descend(arr, self._top_level, 0)
            found = self._search_layer(arr, [(sim, ep)], ef, 0)
            slots = [slot for _, slot in found if slot not in self._dead]
            if not slots:
                return []
            sims = self._vecs[slots] @ arr
            ids = np.asarray([self._ids[s] for s in slots])
            return _rank(ids, sims, k, min_similarity)

    def snapshot_lines(self) -> list[str]:
        with self._lock:
            pairs = [(self._ids[s], self._vecs[s]) for s in range(len(self._ids))
                     if s not in self._dead]
            return snapshot_to_lines(self.SNAPSHOT_MAGIC, self.dimension, self.seed, pairs)

    def save(self, path: str) -> None:
        lines = self.snapshot_lines()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str, m: int = 16, ef_construction: int = 100,
             ef_search: int = 1600) -> "SmallWorldIndex":
        dimension, seed, entries = _read_snapshot(path, cls.SNAPSHOT_MAGIC)
        idx = cls(dimension, seed=seed, m=m, ef_construction=ef_construction,
                  ef_search=ef_search)
        for id_, vec in entries:
            idx.insert(id_, vec)
        return idx


# -------- snapshot format --------
#
# line 1: magic
# line 2: dimension: D
# line 3: seed: S
# line 4: count: N
# then N lines: "<id> <hex> <hex> ..." with float hex components.

def snapshot_to_lines(magic: str, dimension: int, seed: int, pairs) -> list[str]:
    pairs = list(pairs)
    lines = [magic, f"dimension: {dimension}", f"seed: {seed}", f"count: {len(pairs)}"]
    for id_, vec in pairs:
        comps = " ".join(float(c).hex() for c in vec)
        lines.append(f"{id_} {comps}")
    return lines


def parse_snapshot_lines(lines: list[str], magic: str):
    if not lines or lines[0] != magic:
        raise ValidationError(f"snapshot is not a {magic} file")
    try:
        dimension = int(lines[1].split(":", 1)[1])
        seed = int(lines[2].split(":", 1)[1])
        count = int(lines[3].split(":", 1)[1])
    except (IndexError, ValueError) as exc:
        raise ValidationError(f"malformed snapshot header: {exc}") from exc
    body = lines[4:4 + count]
    if len(body) != count:
        raise ValidationError(f"snapshot count {count} does not match {len(body)} entries")
    entries = []
    for line in body:
        parts = line.split(" ")
        entries.append((int(parts[0]), np.asarray([float.fromhex(p) for p in parts[1:]])))
    return dimension, seed, entries


def _write_snapshot(path: str, magic: str, dimension: int, seed: int, pairs) -> None:
    lines = snapshot_to_lines(magic, dimension, seed, pairs)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_snapshot(path: str, magic: str):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    return parse_snapshot_lines(lines, magic)
