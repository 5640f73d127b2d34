"""Knowledge-graph data model, file I/O, synthetic graphs and subgraph extraction."""
from __future__ import annotations

import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
RULE_KINDS = ("modular-shift", "fixed-pairing", "composition", "permutation")
DEFAULT_NODE_CAP = 64


class TripleFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Rule:
    """One synthetic relation.

    modular-shift:  tail = (head + param) mod n
    fixed-pairing:  tail = (param - head) mod n  (an involution)
    permutation:    tail = perm(head), perm a seeded permutation with seed ``param``
    composition:    tail = of[1](of[0](head)), both named relations defined earlier
    """

    name: str
    kind: str
    param: int = 0
    of: tuple = ()

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown rule kind {self.kind!r}; expected one of {RULE_KINDS}")
        if self.kind == "composition" and len(self.of) != 2:
            raise ValueError(f"composition rule {self.name} needs exactly two relations in 'of'")

    @classmethod
    def from_dict(cls, d):
        return cls(name=d["name"], kind=d["kind"], param=int(d.get("param", 0)), of=tuple(d.get("of", ())))

    def to_dict(self):
        d = {"name": self.name, "kind": self.kind, "param": self.param}
        if self.of:
            d["of"] = list(self.of)
        return d


@dataclass(frozen=True)
class Subgraph:
    nodes: np.ndarray  # global entity ids, head first
    edges: np.ndarray  # (E, 3) local (head, relation, tail)
    query: tuple

    @property
    def num_nodes(self):
        return len(self.nodes)


@dataclass(eq=False)
class KnowledgeGraph:
    entities: list
    relations: list
    splits: dict
    features: np.ndarray | None = None
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        n, r = len(self.entities), len(self.relations)
        for name in SPLITS:
            arr = np.asarray(self.splits.get(name, np.zeros((0, 3))), dtype=np.int64).reshape(-1, 3)
            if arr.size and (arr[:, [0, 2]].min() < 0 or arr[:, [0, 2]].max() >= n
                             or arr[:, 1].min() < 0 or arr[:, 1].max() >= r):
                raise ValueError(f"{name} split has indices outside the vocabulary")
            if len(np.unique(arr, axis=0)) != len(arr):
                raise ValueError(f"{name} split contains duplicate triples")
            arr.setflags(write=False)
            self.splits[name] = arr
        if self.features is not None:
            f = np.asarray(self.features, dtype=np.float64)
            if f.shape[0] != n:
                raise ValueError(f"feature matrix has {f.shape[0]} rows for {n} entities")
            if not np.all(np.isfinite(f)):
                raise ValueError("feature matrix contains non-finite values")
            f.setflags(write=False)
            self.features = f

    @property
    def num_entities(self):
        return len(self.entities)

    @property
    def num_relations(self):
        return len(self.relations)

    @property
    def d_feat(self):
        return 0 if self.features is None else self.features.shape[1]

    @cached_property
    def entity_index(self):
        return {e: i for i, e in enumerate(self.entities)}

    @cached_property
    def relation_index(self):
        return {r: i for i, r in enumerate(self.relations)}

    def triples(self, split=None):
        if split is None:
            return np.concatenate([self.splits[s] for s in SPLITS])
        return self.splits[split]

    def stats(self):
        return {
            "entities": self.num_entities,
            "relations": self.num_relations,
            **{s: len(self.splits[s]) for s in SPLITS},
        }

    @cached_property
    def unseen_entities(self):
        train = self.splits["train"]
        seen = set(train[:, 0]) | set(train[:, 2])
        rest = np.concatenate([self.splits["dev"], self.splits["test"]])
        return frozenset(int(e) for e in np.unique(rest[:, [0, 2]])) - seen

    def eval_triples(self, split):
        """Triples of ``split`` whose entities all occur in training."""
        arr = self.splits[split]
        if not self.unseen_entities:
            return arr
        bad = np.array(sorted(self.unseen_entities))
        keep = ~(np.isin(arr[:, 0], bad) | np.isin(arr[:, 2], bad))
        return arr[keep]

    @cached_property
    def known_tails(self):
        """(h, r) -> sorted tails over every split; used for filtered ranking."""
        return _tails_by_query(self.triples())

    @cached_property
    def train_tails(self):
        return _tails_by_query(self.splits["train"])

    @cached_property
    def _train_incidence(self):
        inc = defaultdict(list)
        for i, (h, _, t) in enumerate(self.splits["train"]):
            inc[int(h)].append(i)
            if t != h:
                inc[int(t)].append(i)
        return inc

    @cached_property
    def _cooccurring(self):
        heads = defaultdict(set)
        for h, r, _ in self.splits["train"]:
            heads[int(r)].add(int(h))
        rels = list(heads)
        co = {}
        for r in rels:
            co[r] = frozenset(q for q in rels if heads[r] & heads[q])
        return co

    def cooccurring_relations(self, r):
        return self._cooccurring.get(int(r), frozenset())


def _tails_by_query(triples):
    d = defaultdict(set)
    for h, r, t in triples:
        d[(int(h), int(r))].add(int(t))
    return {k: np.array(sorted(v), dtype=np.int64) for k, v in d.items()}


# ------------------------------------------------------------------ file I/O

def _read_triples(path):
    rows = []
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise TripleFormatError(f"{path}:{lineno}: expected head<TAB>relation<TAB>tail, got {line!r}")
            rows.append(tuple(p.strip() for p in parts))
    return rows


def read_features(path, entity_index):
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise TripleFormatError(f"{path}:1: expected 'N d_feat' header")
        n, d = int(header[0]), int(header[1])
        feats = np.zeros((len(entity_index), d))
        filled = np.zeros(len(entity_index), dtype=bool)
        for lineno, line in enumerate(fh, 2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != d + 1:
                raise TripleFormatError(f"{path}:{lineno}: expected entity id and {d} values")
            idx = entity_index.get(parts[0])
            if idx is None:
                raise TripleFormatError(f"{path}:{lineno}: unknown entity {parts[0]!r}")
            feats[idx] = [float(v) for v in parts[1:]]
            filled[idx] = True
    if n != len(entity_index) or not filled.all():
        raise TripleFormatError(f"{path}: features must cover all {len(entity_index)} entities (header says {n})")
    return feats


def load_triples(train, dev, test, features=None):
    """Read three split files into a :class:`KnowledgeGraph`.

    Entities that occur in dev/test but never in train are reported in
    ``graph.warnings`` and their triples are skipped by ``eval_triples``.
    """
    raw = {name: _read_triples(p) for name, p in zip(SPLITS, (train, dev, test))}
    entities, relations = {}, {}
    for name in SPLITS:
        for h, r, t in raw[name]:
            entities.setdefault(h, len(entities))
            entities.setdefault(t, len(entities))
            relations.setdefault(r, len(relations))
    splits = {}
    warnings = []
    for name in SPLITS:
        seen, rows = set(), []
        for h, r, t in raw[name]:
            key = (entities[h], relations[r], entities[t])
            if key not in seen:
                seen.add(key)
                rows.append(key)
        dups = len(raw[name]) - len(rows)
        if dups:
            warnings.append(f"{name}: dropped {dups} duplicate triples")
        splits[name] = np.array(rows, dtype=np.int64).reshape(-1, 3)
    if not any(len(v) for v in splits.values()):
        warnings.append("empty graph: no triples in any split")
    feats = read_features(features, entities) if features is not None else None
    g = KnowledgeGraph(list(entities), list(relations), splits, feats, warnings)
    for e in sorted(g.unseen_entities):
        g.warnings.append(f"entity {g.entities[e]!r} appears in dev/test but not in train")
    log.info("loaded graph: %s", g.stats())
    for w in g.warnings:
        log.warning(w)
    return g


def load_dataset(directory):
    d = Path(directory)
    feats = d / "features.txt"
    return load_triples(d / "train.txt", d / "dev.txt", d / "test.txt",
                        feats if feats.exists() else None)


def save_dataset(graph, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        with (d / f"{name}.txt").open("w", encoding="utf-8") as fh:
            for h, r, t in graph.splits[name]:
                fh.write(f"{graph.entities[h]}\t{graph.relations[r]}\t{graph.entities[t]}\n")
    if graph.features is not None:
        with (d / "features.txt").open("w", encoding="utf-8") as fh:
            fh.write(f"{graph.num_entities} {graph.d_feat}\n")
            for name, row in zip(graph.entities, graph.features):
                fh.write(name + " " + " ".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------- synthetic

def rule_tails(rules, n_entities):
    """Evaluate every rule on every head; returns {relation name: tail array}."""
    heads = np.arange(n_entities)
    out = {}
    for rule in rules:
        if rule.name in out:
            raise ValueError(f"duplicate relation name {rule.name}")
        if rule.kind == "modular-shift":
            tails = (heads + rule.param) % n_entities
        elif rule.kind == "fixed-pairing":
            tails = (rule.param - heads) % n_entities
        elif rule.kind == "permutation":
            tails = np.random.default_rng(rule.param).permutation(n_entities)
        else:
            a, b = rule.of
            if a not in out or b not in out:
                raise ValueError(f"composition {rule.name} refers to undefined relations {rule.of}")
            tails = out[b][out[a]]
        out[rule.name] = np.asarray(tails, dtype=np.int64)
    return out


def generate_synthetic(n_entities, rules, seed, d_feat=16, split=(0.8, 0.1, 0.1), callables=None):
    """Enumerate rule triples, split them by a seeded shuffle and attach features.

    ``callables`` maps extra relation names to plain ``tail = f(head)``
    functions; their outputs are range-checked like the built-in kinds.
    """
    if n_entities < 4:
        raise ValueError("n_entities must be at least 4")
    if d_feat < 0:
        raise ValueError("d_feat must be non-negative")
    rules = [r if isinstance(r, Rule) else Rule.from_dict(r) for r in rules]
    tails = rule_tails(rules, n_entities)
    for name, fn in (callables or {}).items():
        tails[name] = np.array([fn(h) for h in range(n_entities)], dtype=np.int64)
    rows = []
    for r_idx, (name, t) in enumerate(tails.items()):
        if t.min() < 0 or t.max() >= n_entities:
            raise ValueError(f"rule {name} produced a tail outside [0, {n_entities})")
        rows.append(np.stack([np.arange(n_entities), np.full(n_entities, r_idx), t], axis=1))
    triples = np.concatenate(rows)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(triples))
    n_train = int(round(split[0] * len(triples)))
    n_dev = int(round(split[1] * len(triples)))
    parts = np.split(triples[order], [n_train, n_train + n_dev])
    splits = {name: p[np.lexsort((p[:, 2], p[:, 1], p[:, 0]))] for name, p in zip(SPLITS, parts)}

    feats = None
    if d_feat:
        feats = rng.standard_normal((n_entities, d_feat))
        feats[np.arange(n_entities), np.arange(n_entities) % d_feat] += 1.0
    entities = [f"e{i}" for i in range(n_entities)]
    return KnowledgeGraph(entities, list(tails), splits, feats)


# ----------------------------------------------------------------- subgraph

def extract_subgraph(graph, h, r, hops=2, relation_filter=True, node_cap=DEFAULT_NODE_CAP,
                     seed=0, exclude_query=False):
    """Training triples reachable from ``h`` within ``hops`` undirected steps.

    A triple is kept when one endpoint lies strictly closer than ``hops`` to
    ``h`` (so every kept node is within ``hops``).  With ``exclude_query`` the
    triples answering ``(h, r, ?)`` are hidden from the traversal.
    """
    if hops not in (1, 2):
        raise ValueError(f"hops must be 1 or 2, got {hops}")
    n = graph.num_entities
    if not (0 <= h < n and 0 <= r < graph.num_relations):
        raise IndexError(f"query ({h}, {r}) outside vocabulary")
    train = graph.splits["train"]
    inc = graph._train_incidence

    def usable(i, allowed):
        th, tr, _ = train[i]
        if exclude_query and th == h and tr == r:
            return False
        return allowed is None or int(tr) in allowed

    def traverse(allowed):
        dist = {h: 0}
        frontier = [h]
        kept = []
        for d in range(hops):
            nxt = []
            for u in frontier:
                for i in inc.get(u, ()):
                    if not usable(i, allowed):
                        continue
                    th, _, tt = train[i]
                    v = int(tt) if th == u else int(th)
                    if v not in dist:
                        dist[v] = d + 1
                        nxt.append(v)
                    kept.append(i)
            frontier = nxt
        return dist, sorted(set(kept))

    dist, kept = traverse(graph.cooccurring_relations(r) if relation_filter else None)
    if relation_filter and not kept:
        dist, kept = traverse(None)

    others = [v for v in dist if v != h]
    if others:
        tiebreak = np.random.default_rng([seed, h, r]).permutation(len(others))
        order = sorted(range(len(others)), key=lambda i: (dist[others[i]], tiebreak[i]))
        others = [others[i] for i in order][: max(node_cap - 1, 0)]
    nodes = np.array([h] + others, dtype=np.int64)
    local = {int(v): i for i, v in enumerate(nodes)}
    edges = [(local[int(th)], int(tr), local[int(tt)]) for th, tr, tt in train[kept]
             if int(th) in local and int(tt) in local]
    return Subgraph(nodes, np.array(edges, dtype=np.int64).reshape(-1, 3), (int(h), int(r)))


def filtered_candidates(graph, h, r, gold):
    mask = np.ones(graph.num_entities, dtype=bool)
    known = graph.known_tails.get((int(h), int(r)))
    if known is not None:
        mask[known] = False
    mask[gold] = True
    return mask
