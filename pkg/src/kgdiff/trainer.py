"""Two-stage training: discriminative encoder, then a generative denoiser on top of it frozen."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .config import section_hash
from .denoiser import CDenoiser, DenoiserConfig
from .diffusion import build_schedule, predict_x0, q_sample
from .encoder import EncoderConfig, StructureEncoder, SubgraphCache
from .evaluator import encoder_scores, generated_scores, metrics, rank_rows
from .losses import bce_loss, kl_loss
from .optim import Adam, cosine_lr

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "stage", "loss", "bce", "kl", "dev_MR", "dev_Hits@1", "dev_Hits@3", "dev_Hits@10", "lr")


class TrainingDiverged(FloatingPointError):
    pass


class EncoderMutated(AssertionError):
    pass


@dataclass
class TrainResult:
    best_epoch: int
    best_dev: dict
    history: list = field(default_factory=list)


# ------------------------------------------------------------------ builders

def encoder_config(cfg, graph):
    e = cfg["encoder"]
    return EncoderConfig(graph.num_entities, graph.num_relations, graph.d_feat, dim=e["dim"],
                         mgat_layers=e["mgat_layers"], heads=e["heads"], attention=e["attention"],
                         residual=e["residual"], no_mgat=e["no_mgat"], lambda_per_dim=e["lambda_per_dim"])


def build_encoder(cfg, graph):
    return StructureEncoder(encoder_config(cfg, graph), graph.features, seed=cfg["seed"])


def build_cache(cfg, graph):
    s = cfg["subgraph"]
    return SubgraphCache(graph, hops=s["hops"], relation_filter=s["relation_filter"],
                         node_cap=s["node_cap"], seed=cfg["seed"])


def build_schedule_from(cfg):
    d = cfg["diffusion"]
    return build_schedule(d["steps"], d["beta_start"], d["beta_end"], d["schedule"])


def denoiser_config(cfg, n_entities, cond_dim):
    d = cfg["denoiser"]
    return DenoiserConfig(n_entities, cond_dim, hidden=d["hidden"], mlp=d["mlp"], blocks=d["blocks"],
                          steps=cfg["diffusion"]["steps"], scale_shift=d["scale_shift"],
                          timestep=d["timestep"], no_block=d["no_block"], no_condition=d["no_condition"])


def encoder_hash(enc_cfg):
    return section_hash(enc_cfg.arch())


def denoiser_hash(den_cfg, cfg):
    return section_hash({"denoiser": den_cfg.arch(), "diffusion": cfg["diffusion"]})


def load_encoder(path, graph, force=False):
    """Rebuild an encoder from the architecture recorded in its checkpoint."""
    ckpt = checkpoint.read(path)
    if ckpt.owner != "encoder":
        raise checkpoint.OwnerMismatch(f"{path} holds {ckpt.owner} parameters, expected encoder")
    arch = dict(ckpt.meta["arch"])
    arch.update(n_entities=graph.num_entities, n_relations=graph.num_relations, d_feat=graph.d_feat)
    enc = StructureEncoder(EncoderConfig(**arch), graph.features)
    checkpoint.load_into(enc.params, ckpt, encoder_hash(enc.cfg), force=force)
    return enc, ckpt


def load_denoiser(path, force=False):
    ckpt = checkpoint.read(path)
    if ckpt.owner != "denoiser":
        raise checkpoint.OwnerMismatch(f"{path} holds {ckpt.owner} parameters, expected denoiser")
    den = CDenoiser(DenoiserConfig(**ckpt.meta["arch"]))
    diffusion = ckpt.meta["diffusion"]
    checkpoint.load_into(den.params, ckpt, section_hash({"denoiser": den.cfg.arch(), "diffusion": diffusion}),
                         force=force)
    schedule = build_schedule(diffusion["steps"], diffusion["beta_start"], diffusion["beta_end"],
                              diffusion["schedule"])
    return den, schedule, ckpt


# -------------------------------------------------------------------- labels

def train_queries(graph):
    """Sorted (head, relation) pairs of the training split."""
    return np.array(sorted(graph.train_tails), dtype=np.int64).reshape(-1, 2)


def label_matrix(graph, queries):
    """Multi-hot training tails, one row per query."""
    y = np.zeros((len(queries), graph.num_entities))
    for i, (h, r) in enumerate(queries):
        tails = graph.train_tails.get((int(h), int(r)))
        if tails is None or not len(tails):
            raise ValueError(f"query ({h}, {r}) has no training tail")
        y[i, tails] = 1.0
    return y


# ------------------------------------------------------------------- logging

class EpochLog:
    """Tab-separated per-epoch log; ``path=None`` keeps rows in memory only."""

    def __init__(self, path=None):
        self.rows = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_text("\t".join(LOG_COLUMNS) + "\n")

    def add(self, **row):
        self.rows.append(row)
        if self.path:
            with self.path.open("a") as fh:
                fh.write("\t".join(_cell(row.get(c, "")) for c in LOG_COLUMNS) + "\n")
        log.info("epoch %d %s loss %.5f dev Hits@1 %.4f MR %.2f", row["epoch"], row["stage"], row["loss"],
                 row["dev_Hits@1"], row["dev_MR"])


def _cell(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def _better(cur, best):
    """Higher Hits@1 wins; lower MR breaks ties.  Without a dev split (MR is
    NaN) every epoch wins, so training keeps the last one."""
    if best is None or np.isnan(cur["MR"]):
        return True
    return (cur["Hits@1"], -cur["MR"]) > (best["Hits@1"], -best["MR"])


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def _prepare(out_dir):
    if not out_dir:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_loss(loss, epoch, batch, stage):
    if not np.isfinite(loss):
        raise TrainingDiverged(f"{stage}: loss became {loss} at epoch {epoch}, batch {batch}")


# ------------------------------------------------------------------- stage 1

def stage1_train(graph, cfg, out_dir=None, encoder=None, cache=None):
    """Fit the encoder with BCE on multi-hot labels; keeps the best-dev parameters.

    Writes ``encoder.ckpt`` and ``stage1_log.tsv`` into ``out_dir`` when given.
    Returns the encoder (holding the best-dev parameters) and a TrainResult.
    """
    s1 = cfg["stage1"]
    encoder = encoder or build_encoder(cfg, graph)
    cache = cache or build_cache(cfg, graph)
    queries = train_queries(graph)
    labels = label_matrix(graph, queries)
    dev = graph.eval_triples("dev")
    opt = Adam(encoder.params)
    rng = np.random.default_rng(cfg["seed"])
    n_batches = -(-len(queries) // s1["batch_size"])
    total = n_batches * s1["epochs"]
    out = _prepare(out_dir)
    epoch_log = EpochLog(out / "stage1_log.tsv" if out else None)
    best, best_epoch, best_params, step = None, -1, None, 0
    for epoch in range(s1["epochs"]):
        total_loss = 0.0
        for b, idx in enumerate(_batches(len(queries), s1["batch_size"], rng)):
            lr = cosine_lr(step, total, s1["lr"], s1["min_lr"])
            h, r = queries[idx, 0], queries[idx, 1]
            keep = None
            if s1["query_dropout"]:
                keep = rng.random((len(idx), 1)) >= s1["query_dropout"]
            encoder.params.zero_grad()
            try:
                x0 = encoder.forward(h, r, None if encoder.cfg.no_mgat else cache.batch(h, r), keep).x0
                loss = bce_loss(x0, labels[idx], s1["label_smoothing"])
                _check_loss(loss.item(), epoch, b, "stage 1")
                loss.backward()
            except ad.NonFiniteError as err:
                raise TrainingDiverged(f"stage 1: epoch {epoch}, batch {b}: {err}") from None
            opt.step(lr)
            step += 1
            total_loss += loss.item()
        dev_metrics = _encoder_dev(graph, encoder, cache, dev)
        epoch_log.add(epoch=epoch, stage=1, loss=total_loss / n_batches, bce=total_loss / n_batches, kl=0.0,
                      lr=lr, **{f"dev_{k}": v for k, v in dev_metrics.items()})
        if _better(dev_metrics, best):
            best, best_epoch, best_params = dev_metrics, epoch, encoder.params.snapshot()
    encoder.params.restore(best_params)
    result = TrainResult(best_epoch, best, epoch_log.rows)
    if out:
        save_encoder(out / "encoder.ckpt", encoder, result)
    return encoder, result


def _encoder_dev(graph, encoder, cache, dev):
    if not len(dev):
        return {"MR": float("nan"), "Hits@1": 0.0, "Hits@3": 0.0, "Hits@10": 0.0}
    x0, _ = encoder_scores(encoder, cache, dev[:, 0], dev[:, 1])
    return metrics(rank_rows(graph, x0, dev))


def save_encoder(path, encoder, result=None):
    meta = {"stage": 1, "arch": encoder.cfg.arch()}
    if result is not None:
        meta.update(best_epoch=result.best_epoch, dev=result.best_dev)
    return checkpoint.save(path, encoder.params, encoder_hash(encoder.cfg), meta)


# ------------------------------------------------------------------- stage 2

def _param_bytes(store):
    return {n: p.data.tobytes() for n, p in store.items()}


def stage2_train(graph, encoder, cfg, out_dir=None, cache=None, denoiser=None):
    """Fit the denoiser against the frozen encoder's score vectors.

    Each batch draws one step per query, noises the encoder scores to that
    step, and reconstructs them from the denoiser's noise estimate.  The
    loss is softmax-KL to the encoder scores plus BCE to the training
    labels (either term can be switched off).  The encoder is checked
    bit-for-bit afterwards.
    """
    s2 = cfg["stage2"]
    cache = cache or build_cache(cfg, graph)
    schedule = build_schedule_from(cfg)
    encoder.params.freeze()
    before = _param_bytes(encoder.params)

    queries = train_queries(graph)
    labels = label_matrix(graph, queries)
    # the encoder is frozen, so its outputs are computed once
    x0_all, cond_all = encoder_scores(encoder, cache, queries[:, 0], queries[:, 1])
    dev = graph.eval_triples("dev")
    dev_cond = encoder_scores(encoder, cache, dev[:, 0], dev[:, 1])[1] if len(dev) else None

    den_cfg = denoiser_config(cfg, graph.num_entities, encoder.cfg.dim)
    denoiser = denoiser or CDenoiser(den_cfg, seed=cfg["seed"])
    opt = Adam(denoiser.params)
    rng = np.random.default_rng(cfg["seed"])
    n_batches = -(-len(queries) // s2["batch_size"])
    total = n_batches * s2["epochs"]
    out = _prepare(out_dir)
    epoch_log = EpochLog(out / "stage2_log.tsv" if out else None)
    best, best_epoch, best_params, step = None, -1, None, 0
    for epoch in range(s2["epochs"]):
        sums = np.zeros(3)
        for b, idx in enumerate(_batches(len(queries), s2["batch_size"], rng)):
            lr = cosine_lr(step, total, s2["lr"], s2["min_lr"])
            k = rng.integers(1, schedule.K + 1, size=len(idx))
            eps = rng.standard_normal((len(idx), graph.num_entities))
            x_k = q_sample(schedule, x0_all[idx], k, eps)
            denoiser.params.zero_grad()
            try:
                eps_hat = denoiser.forward(ad.Tensor(x_k), k, cond_all[idx])
                x0_hat = predict_x0(schedule, ad.Tensor(x_k), eps_hat, k)
                terms = generative_loss(x0_all[idx], x0_hat, labels[idx], s2)
                loss = sum(terms.values(), start=ad.Tensor(0.0))
                _check_loss(loss.item(), epoch, b, "stage 2")
                loss.backward()
            except ad.NonFiniteError as err:
                raise TrainingDiverged(f"stage 2: epoch {epoch}, batch {b}: {err}") from None
            opt.step(lr)
            step += 1
            sums += [loss.item(), terms["bce"].item() if "bce" in terms else 0.0,
                     terms["kl"].item() if "kl" in terms else 0.0]
        dev_metrics = _generated_dev(graph, denoiser, schedule, dev, dev_cond, cfg)
        avg = sums / n_batches
        epoch_log.add(epoch=epoch, stage=2, loss=avg[0], bce=avg[1], kl=avg[2], lr=lr,
                      **{f"dev_{k}": v for k, v in dev_metrics.items()})
        if _better(dev_metrics, best):
            best, best_epoch, best_params = dev_metrics, epoch, denoiser.params.snapshot()

    if _param_bytes(encoder.params) != before:
        raise EncoderMutated("encoder parameters changed during stage 2")
    denoiser.params.restore(best_params)
    result = TrainResult(best_epoch, best, epoch_log.rows)
    if out:
        save_denoiser(out / "denoiser.ckpt", denoiser, cfg, encoder, result)
    return denoiser, schedule, result


def generative_loss(x0, x0_hat, y, s2):
    """Enabled loss terms by name; the total is their sum."""
    terms = {}
    if not s2["no_kl"]:
        terms["kl"] = kl_loss(x0, x0_hat, s2["kl_kind"])
    if not s2["no_bce"]:
        terms["bce"] = bce_loss(x0_hat, y, s2["label_smoothing"])
    if not terms:
        raise ValueError("both generative loss terms are disabled")
    return terms


def _generated_dev(graph, denoiser, schedule, dev, dev_cond, cfg):
    if dev_cond is None:
        return {"MR": float("nan"), "Hits@1": 0.0, "Hits@3": 0.0, "Hits@10": 0.0}
    scores = generated_scores(schedule, denoiser, dev_cond, cfg["diffusion"]["chains"], cfg["seed"])
    return metrics(rank_rows(graph, scores, dev))


def save_denoiser(path, denoiser, cfg, encoder, result=None):
    meta = {"stage": 2, "arch": denoiser.cfg.arch(), "diffusion": cfg["diffusion"],
            "encoder_hash": encoder_hash(encoder.cfg)}
    if result is not None:
        meta.update(best_epoch=result.best_epoch, dev=result.best_dev)
    return checkpoint.save(path, denoiser.params, denoiser_hash(denoiser.cfg, cfg), meta)
