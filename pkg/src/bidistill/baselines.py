"""Comparison methods for a missing modality: zero filling, autoencoder feature
generation and a two-network probability ensemble."""
from __future__ import annotations

import numpy as np

from .losses import ce_loss
from .model import (
    Branch,
    ModelDims,
    UnroutableSampleError,
    _slot_of,
    build_clinical_only,
    build_image_only,
    build_multimodal,
    check_role,
)
from .numcore import MLP, ConfigError, ParamStore, RngStream, mse, mse_backward, sgd_step, softmax_temp
from .train import TrainConfig, TrainLog, fit, monitor_samples, safe_f1

UNIFORM = np.array([0.5, 0.5])


class SequencingError(RuntimeError):
    pass


def _zero_input(role, dims: ModelDims):
    return np.zeros((1, dims.d_w)) if role == "image" else np.zeros(dims.d_c)


class FillingModel:
    """One multi-modal network; an absent modality is replaced by zeros."""

    method = "filling"

    def __init__(self, dims: ModelDims, rng, role="clinical"):
        self.role = check_role(role)
        self.dims = dims
        self.net = build_multimodal(dims, rng, role, name="fill", with_proj=False)

    @property
    def params(self):
        return self.net.params

    def inputs(self, sample):
        bag = sample.bag if sample.image_present else None
        cli = sample.clinical if sample.clinical_present else None
        missing_absent = cli is None if self.role == "clinical" else bag is None
        kept_absent = bag is None if self.role == "clinical" else cli is None
        if kept_absent:
            raise UnroutableSampleError(f"sample {sample.sample_id!r} lacks the {self.role}-role kept modality")
        if missing_absent:
            if self.role == "clinical":
                cli = _zero_input("clinical", self.dims)
            else:
                bag = _zero_input("image", self.dims)
        return bag, cli

    def predict(self, sample):
        return self.net.forward(*self.inputs(sample)).probs


class AeModel:
    """Stage 1: a filling network.  Stage 2: an autoencoder from the kept-modality
    feature to the missing-modality feature, spliced in when that modality is absent."""

    method = "ae"

    def __init__(self, dims: ModelDims, rng, role="clinical", hidden=64):
        self.role = check_role(role)
        self.dims = dims
        self.stage1: FillingModel | None = None
        self.stage1_digest = None
        self._rng = rng
        self.hidden = hidden
        self.params = ParamStore()
        self.ae = None
        self.stage2_done = False

    def set_stage1(self, filling: FillingModel):
        self.stage1 = filling
        self.stage1_digest = filling.params.digest()
        miss = _slot_of(self.role)
        kept = 1 - miss
        net = filling.net
        self.ae = MLP(self.params, "ae.net", [net.paths[kept].out_dim, self.hidden, net.paths[miss].out_dim],
                      self._rng.substream("ae") if self._rng is not None else None)

    def _require_stage1(self):
        if self.stage1 is None:
            raise SequencingError("autoencoder stage needs a trained stage-1 network first")

    def stage1_features(self, sample):
        """(kept feature, missing feature) from the frozen stage-1 encoders."""
        self._require_stage1()
        net = self.stage1.net
        miss = _slot_of(self.role)
        kept_f, _ = net.paths[1 - miss].forward(sample.bag, sample.clinical)
        miss_f, _ = net.paths[miss].forward(sample.bag, sample.clinical)
        return kept_f, miss_f

    def generate(self, kept_feat):
        self._require_stage1()
        y, _ = self.ae.forward(np.reshape(kept_feat, (1, -1)))
        return y[0]

    @property
    def all_params(self):
        return ParamStore.merge(self.stage1.params, self.params) if self.stage1 else self.params

    def predict(self, sample):
        self._require_stage1()
        missing_absent = not (sample.clinical_present if self.role == "clinical" else sample.image_present)
        if not missing_absent:
            return self.stage1.predict(sample)
        net = self.stage1.net
        miss = _slot_of(self.role)
        kept = 1 - miss
        if not (sample.image_present if self.role == "clinical" else sample.clinical_present):
            raise UnroutableSampleError(f"sample {sample.sample_id!r} has no usable modality")
        kept_f, _ = net.paths[kept].forward(sample.bag, sample.clinical)
        feats = [None, None]
        feats[kept] = kept_f
        feats[miss] = self.generate(kept_f)
        fused = np.concatenate(feats)
        return softmax_temp(net.cls(fused.reshape(1, -1))[0])


class EnsembleModel:
    """Independent image-only and clinical-only networks; fused probabilities
    alpha * p_img + (1 - alpha) * p_cli, or whichever network still has input."""

    method = "ensemble"

    def __init__(self, dims: ModelDims, rng, alpha=0.5):
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"ensemble alpha must lie in [0, 1], got {alpha}")
        self.alpha = alpha
        self.dims = dims
        self.image_net = build_image_only(dims, rng.substream("img") if rng else None)
        self.clinical_net = build_clinical_only(dims, rng.substream("cli") if rng else None)

    @property
    def params(self):
        return ParamStore.merge(self.image_net.params, self.clinical_net.params)

    def p_img(self, sample):
        return self.image_net.forward(sample.bag, None).probs

    def p_cli(self, sample):
        return self.clinical_net.forward(None, sample.clinical).probs

    def predict(self, sample):
        if sample.image_present and sample.clinical_present:
            return fuse(self.p_img(sample), self.p_cli(sample), self.alpha)
        if sample.image_present:
            return self.p_img(sample)
        if sample.clinical_present:
            return self.p_cli(sample)
        raise UnroutableSampleError(f"sample {sample.sample_id!r} has no modality")


def fuse(p_img, p_cli, alpha=0.5):
    return alpha * np.asarray(p_img) + (1.0 - alpha) * np.asarray(p_cli)


class SingleModalityModel:
    """Image-only or clinical-only reference classifier.

    Predicts the uniform distribution for a sample lacking its modality.
    """

    def __init__(self, branch: Branch, modality: str):
        self.net = branch
        self.modality = modality
        self.method = f"{modality}-only"

    @property
    def params(self):
        return self.net.params

    def predict(self, sample):
        if self.modality == "image":
            return self.net.forward(sample.bag, None).probs if sample.image_present else UNIFORM.copy()
        return self.net.forward(None, sample.clinical).probs if sample.clinical_present else UNIFORM.copy()


# ---------------------------------------------------------------------------
# trainers


def _fit_ce(predictor, branch: Branch, train_set, val_set, cfg: TrainConfig, rng: RngStream):
    params = branch.params
    opt = cfg.sgd()

    def steps(batch):
        total = 0.0
        for s in batch:
            total += ce_loss(branch, s)
        if len(batch) > 1:
            for _, p in params.items():
                p.grad /= len(batch)
        sgd_step(params, opt)
        return {"ce": total / len(batch)}

    mon = monitor_samples(train_set, val_set, cfg)
    log = TrainLog(columns=("epoch", "ce", "monitored_metric"))
    return fit(steps, lambda: safe_f1(predictor, mon, cfg.threshold), train_set, params, cfg, rng, log)


def train_filling(train_set, val_set, cfg: TrainConfig, d_w, d_c=5):
    rng = RngStream(cfg.seed, "train")
    model = FillingModel(cfg.dims(d_w, d_c), rng.substream("init"), cfg.missing_role)
    log = _fit_ce(model, model.net, train_set, val_set, cfg, rng)
    return model, log


def train_ae_stage2(model: AeModel, train_set, val_set, cfg: TrainConfig):
    """Fit the autoencoder on frozen stage-1 features (MSE)."""
    if model.stage1 is None:
        raise SequencingError("autoencoder stage invoked before stage 1")
    rng = RngStream(cfg.seed, "train").substream("ae")
    pairs = [model.stage1_features(s) for s in train_set]
    val_pairs = [model.stage1_features(s) for s in (val_set or train_set)]
    opt = cfg.sgd()
    idx = {s.sample_id: i for i, s in enumerate(train_set)}

    def steps(batch):
        total = 0.0
        for s in batch:
            kept_f, target = pairs[idx[s.sample_id]]
            y, acts = model.ae.forward(kept_f.reshape(1, -1))
            total += mse(y, target)
            model.ae.backward(acts, mse_backward(y, target)[0].reshape(1, -1))
        if len(batch) > 1:
            for _, p in model.params.items():
                p.grad /= len(batch)
        sgd_step(model.params, opt)
        return {"ae_mse": total / len(batch)}

    def monitor():
        return -float(np.mean([mse(model.generate(k), t) for k, t in val_pairs]))

    log = TrainLog(columns=("epoch", "ae_mse", "monitored_metric"))
    return fit(steps, monitor, train_set, model.params, cfg, rng, log)


def train_ae(train_set, val_set, cfg: TrainConfig, d_w, d_c=5):
    filling, log1 = train_filling(train_set, val_set, cfg, d_w, d_c)
    model = AeModel(cfg.dims(d_w, d_c), RngStream(cfg.seed, "train").substream("init"), cfg.missing_role,
                    cfg.ae_hidden)
    model.set_stage1(filling)
    log2 = train_ae_stage2(model, train_set, val_set, cfg)
    if filling.params.digest() != model.stage1_digest:
        raise SequencingError("stage-1 parameters changed during autoencoder training")
    return model, merge_logs({"stage1": log1, "stage2": log2})


def train_ensemble(train_set, val_set, cfg: TrainConfig, d_w, d_c=5):
    rng = RngStream(cfg.seed, "train")
    model = EnsembleModel(cfg.dims(d_w, d_c), rng.substream("init"), cfg.ensemble_alpha)
    img = SingleModalityModel(model.image_net, "image")
    cli = SingleModalityModel(model.clinical_net, "clinical")
    log_i = _fit_ce(img, model.image_net, train_set, val_set, cfg, rng.substream("img"))
    log_c = _fit_ce(cli, model.clinical_net, train_set, val_set, cfg, rng.substream("cli"))
    return model, merge_logs({"image": log_i, "clinical": log_c})


def train_image_only(train_set, val_set, cfg: TrainConfig, d_w, d_c=5):
    # same initialization and data order as the ensemble's image network
    rng = RngStream(cfg.seed, "train")
    net = build_image_only(cfg.dims(d_w, d_c), rng.substream("init").substream("img"))
    model = SingleModalityModel(net, "image")
    return model, _fit_ce(model, net, train_set, val_set, cfg, rng.substream("img"))


def train_clinical_only(train_set, val_set, cfg: TrainConfig, d_w, d_c=5):
    rng = RngStream(cfg.seed, "train")
    net = build_clinical_only(cfg.dims(d_w, d_c), rng.substream("init").substream("cli"))
    model = SingleModalityModel(net, "clinical")
    return model, _fit_ce(model, net, train_set, val_set, cfg, rng.substream("cli"))


def merge_logs(stages: dict) -> TrainLog:
    cols = ["stage", "epoch"]
    for lg in stages.values():
        cols += [c for c in lg.columns[1:] if c not in cols]
    out = TrainLog(columns=tuple(cols))
    for name, lg in stages.items():
        out.rows += [{"stage": name, **r} for r in lg.rows]
    last = list(stages.values())[-1]
    out.best_epoch, out.stop_epoch, out.best_metric = last.best_epoch, last.stop_epoch, last.best_metric
    out.stages = {k: v.summary() for k, v in stages.items()}
    return out
