"""Train and evaluate configuration variants side by side, one report row each."""
from __future__ import annotations

import logging

from . import evaluator, trainer
from .config import with_overrides

log = logging.getLogger(__name__)

# sections whose change invalidates a trained encoder
ENCODER_SECTIONS = ("encoder", "subgraph", "stage1", "data")

STAGE2_VARIANTS = {
    "full": [],
    "no-block": ["denoiser.no_block=true"],
    "no-condition": ["denoiser.no_condition=true"],
    "no-bce": ["stage2.no_bce=true"],
    "no-kl": ["stage2.no_kl=true"],
}
ENCODER_VARIANTS = {"full": [], "no-mgat": ["encoder.no_mgat=true"]}


def _touches_encoder(overrides):
    return any(o.split("=", 1)[0].split(".")[0] in ENCODER_SECTIONS for o in overrides)


def run_variants(graph, cfg, variants, split="test", source="both", encoder=None):
    """Rows of :func:`evaluator.evaluate` tagged with a ``variant`` column.

    ``variants`` maps a label to a list of ``key=value`` overrides.  Variants
    that leave the encoder settings alone share one stage-1 encoder (``encoder``
    if given); the rest train their own.  With ``source="encoder"`` stage 2 is
    skipped.
    """
    shared = encoder
    rows = []
    for label, overrides in variants.items():
        vcfg = with_overrides(cfg, overrides)
        cache = trainer.build_cache(vcfg, graph)
        if _touches_encoder(overrides) or shared is None:
            log.info("variant %s: training the encoder", label)
            enc, _ = trainer.stage1_train(graph, vcfg, cache=cache)
            if not _touches_encoder(overrides):
                shared = enc
        else:
            enc = shared
        den = schedule = None
        if source != "encoder":
            log.info("variant %s: training the denoiser", label)
            den, schedule, _ = trainer.stage2_train(graph, enc, vcfg, cache=cache)
        for row in evaluator.evaluate(graph, enc, cache, split, source, den, schedule,
                                      chains=vcfg["diffusion"]["chains"], seed=vcfg["seed"],
                                      filtered=vcfg["eval"]["filtered"], blend=vcfg["eval"]["blend"],
                                      ties=vcfg["eval"]["ties"]):
            rows.append({"variant": label, **row})
    return rows
