"""Finite-difference checks of every training loss on toy shapes.

Each check perturbs exactly the parameters that the corresponding training
step updates.  The single-branch loss stops the distillation gradient
everywhere except the prompt path, so its finite-difference oracle evaluates
the distillation term on a frozen copy of the branch that shares only the
prompt path with the live one.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

from .baselines import AeModel, FillingModel
from .data import Sample
from .losses import ce_loss, mul_loss, sgl_loss
from .model import BDModel, ModelDims, build_clinical_only, build_image_only
from .numcore import GradCheckReport, RngStream, grad_check, mse, mse_backward
from .train import multi_step_params, single_step_params

TOY_DIMS = ModelDims(d_w=4, d_c=5, d_h=6, expansion=2, att_hidden=5, proj_dim=3,
                     prompt_length=3, prompt_hidden=(4, 3))


@dataclass
class CheckResult:
    loss: str
    report: GradCheckReport

    @property
    def ok(self):
        return self.report.ok


def toy_sample(rng: RngStream, dims=TOY_DIMS, t=3, label=1, sid="toy"):
    bag = rng.normal(0.0, 1.0, size=(t, dims.d_w))
    cli = rng.normal(0.0, 1.0, size=dims.d_c)
    return Sample(sid, label, bag, cli, True, True, "train", True)


def toy_pair(rng: RngStream, dims=TOY_DIMS):
    """Two complete samples of different labels and bag sizes."""
    return [toy_sample(rng.substream("a"), dims, 3, 1, "toy-a"), toy_sample(rng.substream("b"), dims, 2, 0, "toy-b")]


def _mean_loss(fn, samples):
    return sum(fn(s) for s in samples) / len(samples)


def _mean_grad(fn, samples, params):
    for s in samples:
        fn(s)
    for _, p in params.items():
        p.grad /= len(samples)


def jitter(params, rng: RngStream, scale=0.1):
    """Move every parameter off zero.  Zero-initialized biases put ReLU inputs
    exactly on the kink for patches whose features are all zero, where central
    differences return the average of the one-sided slopes."""
    for name, p in params.items():
        p.value += rng.substream(name).normal(0.0, scale, size=p.value.shape)


def _frozen_with_shared_prompt(single):
    """Copy of ``single`` whose prompt paths are the live objects (so they share parameters)."""
    frozen = copy.deepcopy(single)
    for i in single.prompt_slots():
        frozen.paths[i] = single.paths[i]
    return frozen


def check_mul(role="clinical", seed=0, lambda_m=0.6, eps=1e-6, tol=1e-4):
    rng = RngStream(seed, "gradcheck")
    model = BDModel(TOY_DIMS, rng.substream("model"), role)
    jitter(model.params, rng.substream("jitter"))
    pair = toy_pair(rng.substream("data"))
    params = multi_step_params(model)
    return grad_check(
        lambda: _mean_loss(lambda s: mul_loss(model.multi, model.single, s, lambda_m, backward=False).total, pair),
        lambda: _mean_grad(lambda s: mul_loss(model.multi, model.single, s, lambda_m), pair, params),
        params, eps, tol)


def check_sgl(role="clinical", seed=0, lambda_s=0.5, tau=1.2, eps=1e-6, tol=1e-4):
    rng = RngStream(seed, "gradcheck")
    model = BDModel(TOY_DIMS, rng.substream("model"), role)
    jitter(model.params, rng.substream("jitter"))
    pair = toy_pair(rng.substream("data"))
    params = single_step_params(model)
    frozen = _frozen_with_shared_prompt(model.single)

    def loss(s):
        # classification term through the live branch, distillation through the
        # frozen copy: only the shared prompt path sees the distillation term
        c = sgl_loss(model.single, model.multi, s, lambda_s, tau, backward=False).parts["sgl_c"]
        f = sgl_loss(frozen, model.multi, s, lambda_s, tau, backward=False).parts["sgl_f"]
        return c + lambda_s * f

    return grad_check(lambda: _mean_loss(loss, pair),
                      lambda: _mean_grad(lambda s: sgl_loss(model.single, model.multi, s, lambda_s, tau), pair, params),
                      params, eps, tol)


def check_filling(role="clinical", seed=0, eps=1e-6, tol=1e-4):
    rng = RngStream(seed, "gradcheck")
    m = FillingModel(TOY_DIMS, rng.substream("model"), role)
    jitter(m.params, rng.substream("jitter"))
    pair = toy_pair(rng.substream("data"))
    return grad_check(lambda: _mean_loss(lambda s: ce_loss(m.net, s, backward=False), pair),
                      lambda: _mean_grad(lambda s: ce_loss(m.net, s), pair, m.params), m.params, eps, tol)


def check_ae(role="clinical", seed=0, eps=1e-6, tol=1e-4):
    rng = RngStream(seed, "gradcheck")
    m = AeModel(TOY_DIMS, rng.substream("ae"), role, hidden=7)
    m.set_stage1(FillingModel(TOY_DIMS, rng.substream("model"), role))
    jitter(m.all_params, rng.substream("jitter"))
    feats = [m.stage1_features(s) for s in toy_pair(rng.substream("data"))]

    def grad_one(pair):
        kept, target = pair
        y, acts = m.ae.forward(kept.reshape(1, -1))
        m.ae.backward(acts, mse_backward(y, target)[0].reshape(1, -1))

    return grad_check(lambda: _mean_loss(lambda f: mse(m.generate(f[0]), f[1]), feats),
                      lambda: _mean_grad(grad_one, feats, m.params), m.params, eps, tol)


def check_single_modality(modality, seed=0, eps=1e-6, tol=1e-4):
    rng = RngStream(seed, "gradcheck")
    build = build_image_only if modality == "image" else build_clinical_only
    net = build(TOY_DIMS, rng.substream("model"))
    jitter(net.params, rng.substream("jitter"))
    pair = toy_pair(rng.substream("data"))
    return grad_check(lambda: _mean_loss(lambda s: ce_loss(net, s, backward=False), pair),
                      lambda: _mean_grad(lambda s: ce_loss(net, s), pair, net.params), net.params, eps, tol)


def run_all(seed=0, tol=1e-4) -> list[CheckResult]:
    out = []
    for role in ("clinical", "image"):
        out.append(CheckResult(f"L_mul[{role}]", check_mul(role, seed, tol=tol)))
        out.append(CheckResult(f"L_sgl[{role}]", check_sgl(role, seed, tol=tol)))
        out.append(CheckResult(f"filling_ce[{role}]", check_filling(role, seed, tol=tol)))
        out.append(CheckResult(f"ae_mse[{role}]", check_ae(role, seed, tol=tol)))
    out.append(CheckResult("image_only_ce", check_single_modality("image", seed, tol=tol)))
    out.append(CheckResult("clinical_only_ce", check_single_modality("clinical", seed, tol=tol)))
    return out


def format_results(results) -> str:
    lines = []
    for r in results:
        lines.append(f"{'PASS' if r.ok else 'FAIL'} {r.loss} max_rel_err={r.report.max_error:.3e}")
        for name, err in r.report.errors.items():
            flag = "" if err < r.report.tol else "  <-- exceeds tolerance"
            lines.append(f"    {name} {err:.3e}{flag}")
    return "\n".join(lines) + "\n"


def max_error(results) -> float:
    return max((r.report.max_error for r in results), default=0.0)
