"""Structure-aware query encoder.

A (head, relation) query is embedded by a small fusion MLP, refined by
relation-aware graph attention over the query subgraph, mixed back with a
learnable convex gate and scored against every entity by a tied LM head.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .kg import extract_subgraph
from .params import ParameterStore, glorot


ATTENTION_KINDS = ("query-key", "additive")


@dataclass(frozen=True)
class EncoderConfig:
    n_entities: int
    n_relations: int
    d_feat: int = 0
    dim: int = 64
    mgat_layers: int = 3
    heads: int = 4
    leaky_slope: float = 0.2
    attention: str = "query-key"
    residual: bool = True
    no_mgat: bool = False
    lambda_per_dim: bool = False

    def __post_init__(self):
        if self.attention not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {self.attention!r}")
        for name in ("n_entities", "n_relations", "dim", "mgat_layers", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def arch(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class EncoderOutput:
    h_mask: ad.Tensor
    z_mask: ad.Tensor
    fused: ad.Tensor
    x0: ad.Tensor
    attention: list  # per layer (E, heads) arrays, for inspection


@dataclass
class BatchGraph:
    """Several query subgraphs merged into one node/edge list.

    Query ``i``'s head is node ``i``; other nodes follow.  Message edges run
    both ways along every triple plus one self-loop per node.
    """

    other_nodes: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    etype: np.ndarray
    num_nodes: int


def batch_subgraphs(subgraphs, n_relations):
    b = len(subgraphs)
    others, src, dst, etype = [], [], [], []
    offset = b
    for i, sg in enumerate(subgraphs):
        k = sg.num_nodes
        # local 0 -> i, local j>0 -> offset + j - 1
        remap = np.empty(k, dtype=np.int64)
        remap[0] = i
        remap[1:] = offset + np.arange(k - 1)
        others.append(sg.nodes[1:])
        if len(sg.edges):
            u, rel, v = remap[sg.edges[:, 0]], sg.edges[:, 1], remap[sg.edges[:, 2]]
            src += [u, v]
            dst += [v, u]
            etype += [rel, rel + n_relations]
        offset += k - 1
    total = offset
    loops = np.arange(total)
    src.append(loops)
    dst.append(loops)
    etype.append(np.full(total, 2 * n_relations))
    return BatchGraph(
        other_nodes=np.concatenate(others).astype(np.int64) if others else np.zeros(0, np.int64),
        src=np.concatenate(src).astype(np.int64),
        dst=np.concatenate(dst).astype(np.int64),
        etype=np.concatenate(etype).astype(np.int64),
        num_nodes=total,
    )


class StructureEncoder:
    def __init__(self, cfg: EncoderConfig, features=None, seed=0, dtype=np.float64):
        self.cfg = cfg
        if features is not None and features.shape != (cfg.n_entities, cfg.d_feat):
            raise ValueError(f"features shape {features.shape} != ({cfg.n_entities}, {cfg.d_feat})")
        self.features = None if features is None else np.asarray(features, dtype=dtype)
        self.params = ParameterStore("encoder", dtype)
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        c, p = self.cfg, self.params
        d, heads = c.dim, c.heads
        p.add("entity_emb", rng.normal(0.0, 1.0 / np.sqrt(d), (c.n_entities, d)))
        p.add("entity_bias", np.zeros(c.n_entities))
        p.add("relation_emb", rng.normal(0.0, 1.0 / np.sqrt(d), (c.n_relations, d)))
        if c.d_feat:
            # starts silent so early training leans on the embedding table
            p.add("feat_proj", np.zeros((c.d_feat, d)))
        p.add("query_w1", glorot(rng, 2 * d, d))
        p.add("query_b1", np.zeros(d))
        p.add("query_w2", glorot(rng, d, d))
        p.add("query_b2", np.zeros(d))
        if not c.no_mgat:
            # forward, inverse and self-loop edge types
            p.add("edge_rel_emb", rng.normal(0.0, 1.0 / np.sqrt(d), (2 * c.n_relations + 1, d)))
            for layer in range(c.mgat_layers):
                p.add(f"mgat{layer}_value", glorot(rng, d, heads * d))
                p.add(f"mgat{layer}_rel", glorot(rng, d, heads * d))
                if c.attention == "additive":
                    p.add(f"mgat{layer}_att", rng.normal(0.0, 0.1, (3, heads, d)))
                else:
                    p.add(f"mgat{layer}_query", glorot(rng, d, heads * d))
                    p.add(f"mgat{layer}_key", glorot(rng, d, heads * d))
                p.add(f"mgat{layer}_out", glorot(rng, heads * d, d))
                p.add(f"mgat{layer}_out_b", np.zeros(d))
            p.add("lambda_raw", np.zeros(d if c.lambda_per_dim else 1))

    # ------------------------------------------------------------ pieces

    def node_init(self, entities):
        """entity embedding + projected features for the given entity ids."""
        x = ad.take(self.params["entity_emb"], entities)
        if self.features is not None:
            x = x + ad.Tensor(self.features[entities]) @ self.params["feat_proj"]
        return x

    def encode_query(self, heads, rels, keep=None):
        """Fuse head and relation into the query vector.

        ``keep`` is an optional (B, 1) 0/1 mask applied to the head part; the
        trainer uses it to hide the head identity from some training rows.
        """
        p = self.params
        heads = np.atleast_1d(np.asarray(heads, dtype=np.int64))
        rels = np.atleast_1d(np.asarray(rels, dtype=np.int64))
        head = self.node_init(heads)
        if keep is not None:
            head = head * np.asarray(keep, dtype=np.float64).reshape(-1, 1)
        q = ad.concat([head, ad.take(p["relation_emb"], rels)], axis=-1)
        hidden = ad.gelu(q @ p["query_w1"] + p["query_b1"])
        return hidden @ p["query_w2"] + p["query_b2"]

    def entity_table(self):
        """Representation of every entity: embedding plus projected features."""
        return self.node_init(np.arange(self.cfg.n_entities))

    def _edge_logits(self, layer, x, bg):
        p, c = self.params, self.cfg
        heads, d, m = c.heads, c.dim, bg.num_nodes
        rel_table = p["edge_rel_emb"]
        if c.attention == "additive":
            # fold each head's attention vector into its transform: (d, heads)
            att = p[f"mgat{layer}_att"]
            a_src = (p[f"mgat{layer}_value"].reshape(d, heads, d) * att[0]).sum(axis=-1)
            a_dst = (p[f"mgat{layer}_value"].reshape(d, heads, d) * att[1]).sum(axis=-1)
            a_rel = (p[f"mgat{layer}_rel"].reshape(d, heads, d) * att[2]).sum(axis=-1)
            return ad.leaky_relu(
                ad.take(x @ a_src, bg.src) + ad.take(x @ a_dst, bg.dst) + ad.take(rel_table @ a_rel, bg.etype),
                c.leaky_slope,
            )
        query = (x @ p[f"mgat{layer}_query"]).reshape(m, heads, d)
        key = (x @ p[f"mgat{layer}_key"]).reshape(m, heads, d)
        rel = (rel_table @ p[f"mgat{layer}_rel"]).reshape(-1, heads, d)
        key = ad.take(key, bg.src) + ad.take(rel, bg.etype)
        return (ad.take(query, bg.dst) * key).sum(axis=-1) * (1.0 / np.sqrt(d))

    def mgat_forward(self, h_mask, bg: BatchGraph, return_attention=False):
        p, c = self.params, self.cfg
        heads, d = c.heads, c.dim
        b = h_mask.shape[0]
        x = h_mask if not len(bg.other_nodes) else ad.concat([h_mask, self.node_init(bg.other_nodes)], axis=0)
        m = bg.num_nodes
        attention = []
        for layer in range(c.mgat_layers):
            alpha = ad.segment_softmax(self._edge_logits(layer, x, bg), bg.dst, m)  # (E, heads)
            attention.append(alpha.data)
            values = (x @ p[f"mgat{layer}_value"]).reshape(m, heads, d)
            agg = ad.attend(values, alpha, bg.src, bg.dst, m).reshape(m, heads * d)
            update = ad.gelu(agg) @ p[f"mgat{layer}_out"] + p[f"mgat{layer}_out_b"]
            x = x + update if c.residual else update
        z = x[np.arange(b)]
        return (z, attention) if return_attention else z

    def adaptive_fuse(self, h_mask, z_mask):
        lam = ad.sigmoid(self.params["lambda_raw"])
        return h_mask * lam + z_mask * (1.0 - lam)

    def lm_head(self, fused):
        """Score every entity against the fused query; weights tied to the entity table."""
        return fused @ self.entity_table().T + self.params["entity_bias"]

    @staticmethod
    def condition_of(fused):
        return fused

    # ------------------------------------------------------------ forward

    def forward(self, heads, rels, subgraphs=None, keep=None):
        h_mask = self.encode_query(heads, rels, keep)
        if self.cfg.no_mgat:
            return EncoderOutput(h_mask, h_mask, h_mask, self.lm_head(h_mask), [])
        bg = batch_subgraphs(subgraphs, self.cfg.n_relations)
        z_mask, att = self.mgat_forward(h_mask, bg, return_attention=True)
        fused = self.adaptive_fuse(h_mask, z_mask)
        return EncoderOutput(h_mask, z_mask, fused, self.lm_head(fused), att)


class SubgraphCache:
    """Memoized ``extract_subgraph`` keyed by query; the graph is immutable."""

    def __init__(self, graph, hops=2, relation_filter=True, node_cap=64, seed=0, exclude_query=True):
        self.graph = graph
        self.kwargs = dict(hops=hops, relation_filter=relation_filter, node_cap=node_cap,
                           seed=seed, exclude_query=exclude_query)
        self._cache = {}

    def __call__(self, h, r):
        key = (int(h), int(r))
        sg = self._cache.get(key)
        if sg is None:
            sg = extract_subgraph(self.graph, key[0], key[1], **self.kwargs)
            self._cache[key] = sg
        return sg

    def batch(self, heads, rels):
        return [self(h, r) for h, r in zip(heads, rels)]
