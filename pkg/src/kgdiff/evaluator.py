"""Filtered ranking, MR/Hits@k, per-source reports and trajectory export."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .diffusion import generate
from .kg import filtered_candidates

HITS_AT = (1, 3, 10)
REPORT_COLUMNS = ("source", "split", "MR", "Hits@1", "Hits@3", "Hits@10", "queries")
TRAJECTORY_COLUMNS = ("query_id", "step", "entity_id", "score", "is_gold")


def rank_of(scores, gold, mask=None, ties="pessimistic"):
    """1 + number of kept competitors scoring above ``gold``.

    With pessimistic ties (the default) a competitor scoring exactly the
    same also counts, so the rank is a lower bound on quality; optimistic
    ties let the gold entity win them.  ``mask`` marks the candidates that
    stay in the ranking.
    """
    scores = np.asarray(scores)
    if mask is None:
        mask = np.ones(len(scores), dtype=bool)
    if not mask[gold]:
        raise ValueError(f"gold entity {gold} is masked out of its own ranking")
    if ties == "pessimistic":
        # gold itself is counted once, giving the leading 1
        return int((mask & (scores >= scores[gold])).sum())
    if ties == "optimistic":
        return 1 + int((mask & (scores > scores[gold])).sum())
    raise ValueError(f"unknown tie rule {ties!r}")


def metrics(ranks):
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("metrics of an empty rank list")
    out = {"MR": float(ranks.mean())}
    for k in HITS_AT:
        out[f"Hits@{k}"] = float(np.mean(ranks <= k))
    return out


def rank_rows(graph, scores, triples, filtered=True, ties="pessimistic"):
    """Rank each row of ``scores`` (one per triple) for its gold tail."""
    ranks = np.empty(len(triples), dtype=np.int64)
    for i, (h, r, t) in enumerate(triples):
        mask = filtered_candidates(graph, h, r, t) if filtered else None
        ranks[i] = rank_of(scores[i], t, mask, ties)
    return ranks


def encoder_scores(encoder, cache, heads, rels, batch_size=256):
    """Frozen-encoder forward pass: (score vectors, condition embeddings)."""
    xs, conds = [], []
    with ad.no_grad():
        for s in range(0, len(heads), batch_size):
            h, r = heads[s:s + batch_size], rels[s:s + batch_size]
            sgs = None if encoder.cfg.no_mgat else cache.batch(h, r)
            out = encoder.forward(h, r, sgs)
            xs.append(out.x0.data)
            conds.append(encoder.condition_of(out.fused).data)
    n, d = encoder.cfg.n_entities, encoder.cfg.dim
    if not xs:
        return np.zeros((0, n)), np.zeros((0, d))
    return np.concatenate(xs), np.concatenate(conds)


def generated_scores(schedule, denoiser, cond, chains, seed, batch_size=256):
    rng = np.random.default_rng(seed)
    n = denoiser.cfg.n_entities
    parts = [generate(schedule, denoiser, cond[s:s + batch_size], n, chains=chains, rng=rng)
             for s in range(0, len(cond), batch_size)]
    return np.concatenate(parts) if parts else np.zeros((0, n))


def evaluate(graph, encoder, cache, split="test", source="both", denoiser=None, schedule=None,
             chains=4, seed=0, filtered=True, blend=0.0, ties="pessimistic"):
    """Metric rows for the requested score sources.

    ``source`` is ``encoder``, ``generated`` or ``both``.  With ``blend`` > 0
    the generated row ranks ``(1 - blend) * generated + blend * encoder``.
    """
    if source not in ("encoder", "generated", "both"):
        raise ValueError(f"unknown score source {source!r}")
    if source != "encoder" and (denoiser is None or schedule is None):
        raise ValueError("generated scores need a trained denoiser and its noise schedule")
    triples = graph.eval_triples(split)
    if not len(triples):
        raise ValueError(f"split {split!r} has no evaluable triples")
    x0, cond = encoder_scores(encoder, cache, triples[:, 0], triples[:, 1])
    rows = []
    if source in ("encoder", "both"):
        rows.append(_row("encoder", split, rank_rows(graph, x0, triples, filtered, ties)))
    if source in ("generated", "both"):
        gen = generated_scores(schedule, denoiser, cond, chains, seed)
        if blend:
            gen = (1.0 - blend) * gen + blend * x0
        rows.append(_row("generated", split, rank_rows(graph, gen, triples, filtered, ties)))
    return rows


def _row(source, split, ranks):
    return {"source": source, "split": split, **metrics(ranks), "queries": len(ranks)}


def write_report(rows, path, extra_columns=()):
    cols = tuple(extra_columns) + REPORT_COLUMNS
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(row[c]) for c in cols) + "\n")


def read_report(path):
    with Path(path).open(encoding="utf-8") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def format_rows(rows, extra_columns=()):
    cols = tuple(extra_columns) + REPORT_COLUMNS
    lines = ["  ".join(f"{c:>10}" for c in cols)]
    for row in rows:
        lines.append("  ".join(f"{row[c]:>10.4f}" if isinstance(row[c], float) else f"{row[c]:>10}"
                               for c in cols))
    return "\n".join(lines)


# ------------------------------------------------------------- trajectories

def trajectory(schedule, denoiser, cond, seed):
    """One seeded reverse chain per condition row; returns [(k, x0 estimate)] for k = K..0."""
    trace = []
    generate(schedule, denoiser, cond, denoiser.cfg.n_entities, chains=1,
             rng=np.random.default_rng(seed), trace=trace)
    return trace


def _top_with_gold(scores, gold, m):
    order = np.argsort(-scores, kind="stable")[:m]
    if gold not in order:
        order = np.concatenate([order[:m - 1], [gold]])
    return order


def dump_trajectory(graph, encoder, cache, denoiser, schedule, triples, seed, path, top_m=32):
    """Write the running x0 estimate of one reverse chain per query as CSV.

    For every step ``k = K..0`` the top ``top_m`` entities are written, the
    gold tail always among them, giving ``(K + 1) * top_m`` rows per query.
    Returns the trace so callers can inspect ranks without re-reading the file.
    """
    top_m = min(top_m, graph.num_entities)
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    _, cond = encoder_scores(encoder, cache, triples[:, 0], triples[:, 1])
    trace = trajectory(schedule, denoiser, cond, seed)
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for q, (_, _, gold) in enumerate(triples):
            for k, est in trace:
                for e in _top_with_gold(est[q], gold, top_m):
                    w.writerow((q, k, int(e), repr(float(est[q, e])), int(e == gold)))
    return trace


def refinement_fraction(graph, trace, triples, filtered=True):
    """Share of queries whose gold rank at step 0 is no worse than at step K."""
    (_, first), (_, last) = trace[0], trace[-1]
    start = rank_rows(graph, first, triples, filtered)
    end = rank_rows(graph, last, triples, filtered)
    return float(np.mean(end <= start)), start, end
