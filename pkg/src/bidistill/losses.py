"""Distillation and classification losses with their gradient-flow boundaries.

Multi-modal step:   L_mul = CE(G_mul([f_img, f_cli])) + lambda_m * MSE(M_mul(kept_m), M_sgl(kept_s))
Single-modal step:  L_sgl = CE(G_sgl([.., prompt])) + lambda_s * (MSE(fused_s, fused_m)
                                                             + tau^2 KL(p_s^tau || p_m^tau))

``kept`` is the feature of the modality the single branch actually encodes.
The single-branch feature in the multi step is a detached teacher (only its
projection head M_sgl receives gradient).  The multi-branch outputs in the
single step are a frozen teacher, and the distillation term of the single step
only reaches the prompt path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import (
    ConfigError,
    DimensionError,
    cross_entropy,
    cross_entropy_backward,
    kl_div,
    kl_div_backward_p,
    mse,
    mse_backward,
    softmax_backward,
    softmax_temp,
)


@dataclass
class LossBundle:
    total: float
    parts: dict = field(default_factory=dict)
    lambda_m: float | None = None
    lambda_s: float | None = None
    tau: float | None = None

    def __getitem__(self, key):
        return self.parts[key]


def _check_lambda(name, lam):
    if lam < 0:
        raise ConfigError(f"{name} must be non-negative, got {lam}")


def loss_mul_c(outputs, label: int) -> float:
    return cross_entropy(outputs.probs, label)


def ce_logit_grad(probs, label):
    return softmax_backward(probs, cross_entropy_backward(probs, label))


def loss_mul_f(f_m, f_s, proj_m, proj_s) -> float:
    """MSE between the two 64-d projections; ``proj_*`` are Linear layers."""
    return mse(proj_m(np.reshape(f_m, (1, -1))), proj_s(np.reshape(f_s, (1, -1))))


def loss_mul_total(mul_c: float, mul_f: float, lambda_m: float) -> float:
    _check_lambda("lambda_m", lambda_m)
    return mul_c + lambda_m * mul_f


def kl_term(logits_s, logits_m, tau: float) -> float:
    return tau * tau * kl_div(softmax_temp(logits_s, tau), softmax_temp(logits_m, tau))


def kl_term_grad(logits_s, logits_m, tau: float) -> np.ndarray:
    """d/dlogits_s of tau^2 KL(softmax(z_s/tau) || softmax(z_m/tau))."""
    p = softmax_temp(logits_s, tau)
    q = softmax_temp(logits_m, tau)
    return tau * tau * softmax_backward(p, kl_div_backward_p(p, q), tau)


def loss_sgl_f(single_out, multi_out, tau: float) -> tuple[float, float]:
    """Return (feature MSE, tau^2-scaled KL); their sum is the distillation loss."""
    if single_out.fused.shape != multi_out.fused.shape:
        raise DimensionError(f"fused features differ: {single_out.fused.shape} vs {multi_out.fused.shape}")
    return mse(single_out.fused, multi_out.fused), kl_term(single_out.logits, multi_out.logits, tau)


def loss_sgl_total(sgl_c: float, sgl_f: float, lambda_s: float) -> float:
    _check_lambda("lambda_s", lambda_s)
    return sgl_c + lambda_s * sgl_f


# ---------------------------------------------------------------------------
# full losses with backward


def _inputs(sample):
    return sample.bag, sample.clinical


def mul_loss(multi, single, sample, lambda_m=0.6, backward=True) -> LossBundle:
    """L_mul on one complete sample.  With ``backward`` the gradients land in the
    multi branch and in the single branch's projection head only."""
    _check_lambda("lambda_m", lambda_m)
    bag, cli = _inputs(sample)
    out_m = multi.forward(bag, cli)
    mul_c = cross_entropy(out_m.probs, sample.label)
    k = multi.kept_slot
    kept_m = out_m.feats[k]
    kept_s, _ = single.paths[single.kept_slot].forward(bag, cli)  # teacher, detached
    pm = multi.project(kept_m)
    ps = single.project(kept_s)
    mul_f = mse(pm, ps)
    total = loss_mul_total(mul_c, mul_f, lambda_m)
    if backward:
        g_fused = multi.cls_backward(out_m, ce_logit_grad(out_m.probs, sample.label))
        g_pm, g_ps = mse_backward(pm, ps)
        g_kept = multi.proj_backward(kept_m, lambda_m * g_pm)
        single.proj_backward(kept_s, lambda_m * g_ps)
        g_fused = g_fused.copy()
        g_fused[multi.offsets[k]:multi.offsets[k + 1]] += g_kept
        multi.paths_backward(out_m, g_fused)
    return LossBundle(total, {"mul_c": mul_c, "mul_f": mul_f}, lambda_m=lambda_m)


def sgl_loss(single, multi, sample, lambda_s=0.5, tau=1.2, backward=True,
             distill_backward=True) -> LossBundle:
    """L_sgl on one sample; the multi branch is a frozen teacher.

    The classification term trains every single-branch parameter except the
    projection head.  The distillation term is masked so that only the prompt
    vector and its mapper receive its gradient; in particular it never updates
    the classifier G_sgl even though its gradient passes through it.
    """
    _check_lambda("lambda_s", lambda_s)
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    bag, cli = _inputs(sample)
    out_s = single.forward(bag, cli)
    out_m = multi.forward(bag, cli)  # frozen teacher
    sgl_c = cross_entropy(out_s.probs, sample.label)
    feat, kl = loss_sgl_f(out_s, out_m, tau)
    sgl_f = feat + kl
    total = loss_sgl_total(sgl_c, sgl_f, lambda_s)
    if backward:
        g_fused = single.cls_backward(out_s, ce_logit_grad(out_s.probs, sample.label))
        if distill_backward and lambda_s:
            g_fused = g_fused + lambda_s * _masked_distill_grad(single, out_s, out_m, tau)
        single.paths_backward(out_s, g_fused)
    return LossBundle(total, {"sgl_c": sgl_c, "sgl_f_feat": feat, "sgl_f_kl": kl, "sgl_f": sgl_f},
                      lambda_s=lambda_s, tau=tau)


def _masked_distill_grad(single, out_s, out_m, tau):
    # gradient w.r.t. the fused single-branch feature, zero outside the prompt slots
    g_f = mse_backward(out_s.fused, out_m.fused)[0]
    g_f = g_f + single.cls_backward(out_s, kl_term_grad(out_s.logits, out_m.logits, tau), accumulate=False)
    g = np.zeros_like(g_f)
    for i in single.prompt_slots():
        sl = slice(single.offsets[i], single.offsets[i + 1])
        g[sl] = g_f[sl]
    return g


def sgl_f_only_backward(single, multi, sample, tau=1.2):
    """Backward of the distillation term alone (unit weight); used to check masking."""
    out_s = single.forward(sample.bag, sample.clinical)
    out_m = multi.forward(sample.bag, sample.clinical)
    single.paths_backward(out_s, _masked_distill_grad(single, out_s, out_m, tau))


def ce_loss(branch, sample, backward=True, bag=None, clinical=None) -> float:
    """Plain cross-entropy of one branch (baselines)."""
    out = branch.forward(sample.bag if bag is None else bag, sample.clinical if clinical is None else clinical)
    loss = cross_entropy(out.probs, sample.label)
    if backward:
        branch.paths_backward(out, branch.cls_backward(out, ce_logit_grad(out.probs, sample.label)))
    return loss
