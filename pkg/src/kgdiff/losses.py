"""Discriminative (BCE) and generative (KL) objectives over score vectors."""
import numpy as np

from . import autodiff as ad


def bce_loss(x, y, smoothing=0.0):
    """Mean binary cross-entropy of logits ``x`` against 0/1 labels ``y``.

    Written through log-sigmoid so saturated logits never overflow.
    """
    x = ad.as_tensor(x)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ad.ShapeError(f"bce_loss: scores {x.shape} vs labels {y.shape}")
    if smoothing:
        y = y * (1.0 - smoothing) + 0.5 * smoothing
    ll = ad.log_sigmoid(x) * y + ad.log_sigmoid(-x) * (1.0 - y)
    return -ll.mean()


def kl_loss(x0, x0_hat, kind="softmax"):
    """KL(target || generated) averaged over rows.

    ``x0`` is the frozen encoder's score vector and never receives gradient.
    ``kind="softmax"`` compares the softmax distributions over entities;
    ``kind="sigmoid"`` averages per-entity Bernoulli KLs.
    """
    x0_hat = ad.as_tensor(x0_hat)
    target = x0.data if isinstance(x0, ad.Tensor) else np.asarray(x0, dtype=np.float64)
    if target.shape != x0_hat.shape:
        raise ad.ShapeError(f"kl_loss: target {target.shape} vs generated {x0_hat.shape}")
    target = np.atleast_2d(target)
    if x0_hat.ndim == 1:
        x0_hat = x0_hat.reshape(1, -1)
    if kind == "softmax":
        with ad.no_grad():
            log_p = ad.log_softmax(ad.Tensor(target)).data
        p = np.exp(log_p)
        kl = (ad.Tensor(log_p) - ad.log_softmax(x0_hat)) * p
        return kl.sum(axis=-1).mean()
    if kind == "sigmoid":
        with ad.no_grad():
            lp1 = ad.log_sigmoid(ad.Tensor(target)).data
            lp0 = ad.log_sigmoid(ad.Tensor(-target)).data
        p1 = np.exp(lp1)
        kl = (ad.Tensor(lp1) - ad.log_sigmoid(x0_hat)) * p1 + (ad.Tensor(lp0) - ad.log_sigmoid(-x0_hat)) * (1.0 - p1)
        return kl.mean()
    raise ValueError(f"unknown KL kind {kind!r}")
