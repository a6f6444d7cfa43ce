"""Two-branch network: per-branch bag encoders with attention pooling, the
clinical encoder, the learnable prompt path, projection heads, classifiers and
test-time routing.

A branch is a classifier over the concatenation ``[image feature, clinical
feature]``.  Each slot is filled by a *path*: an ``ImageEncoder`` (bag of patch
features -> pooled vector), a ``ClinicalEncoder`` (record -> expanded vector)
or a ``PromptPath`` (shared learnable vector -> substitute feature).
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import kernels
from .numcore import (
    ConfigError,
    DimensionError,
    Linear,
    MLP,
    ParamStore,
    RngStream,
    glorot,
    relu,
    relu_backward,
    softmax_temp,
)

ROLES = ("clinical", "image")


class EmptyBagError(ValueError):
    pass


class UnroutableSampleError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    d_w: int = 32
    d_c: int = 5
    d_h: int = 128
    expansion: int = 20
    att_hidden: int = 64
    proj_dim: int = 64
    prompt_length: int = 50
    prompt_hidden: tuple = (100, 50)
    n_classes: int = 2

    @property
    def d_cf(self) -> int:
        return self.expansion * self.d_c


def check_role(role: str) -> str:
    if role not in ROLES:
        raise ConfigError(f"missing_role must be one of {ROLES}, got {role!r}")
    return role


# ---------------------------------------------------------------------------
# paths


class ImageEncoder:
    """Patch adapter + attention head H + softmax pooling."""

    kind = "image"

    def __init__(self, params: ParamStore, name: str, dims: ModelDims, rng: RngStream | None):
        self.adapter = Linear(params, f"{name}.adapter", dims.d_w, dims.d_h, rng)
        hid = dims.att_hidden
        self.att = MLP(params, f"{name}.att", [dims.d_h, hid, hid, 1], rng)
        self.out_dim = dims.d_h
        self.d_in = dims.d_w

    def _params(self):
        layers = [self.adapter, *self.att.layers]
        return [p for layer in layers for p in (layer.w, layer.b)]

    def forward(self, bag, clinical=None):
        if bag is None:
            raise ValueError("image encoder needs a patch bag")
        bag = np.asarray(bag, dtype=np.float64)
        if bag.ndim != 2 or bag.shape[0] == 0:
            raise EmptyBagError("patch bag must contain at least one patch")
        if bag.shape[1] != self.d_in:
            raise DimensionError(f"patch dimension {bag.shape[1]} != adapter input {self.d_in}")
        weights = tuple(p.value for p in self._params())
        pooled, att, cache = kernels.bag_forward(bag, weights)
        return pooled, (cache, att)

    def backward(self, cache, g, accumulate=True):
        if not accumulate:
            return
        ps = self._params()
        kernels.bag_backward(cache[0], np.ascontiguousarray(g), tuple(p.value for p in ps),
                             tuple(p.grad for p in ps))

    def attention(self, cache):
        return cache[1]


class ClinicalEncoder:
    """One FC+ReLU layer expanding d_c to k*d_c."""

    kind = "clinical"

    def __init__(self, params, name, dims: ModelDims, rng):
        self.fc = Linear(params, f"{name}.fc", dims.d_c, dims.d_cf, rng)
        self.out_dim = dims.d_cf
        self.d_in = dims.d_c

    def forward(self, bag, clinical):
        if clinical is None:
            raise ValueError("clinical encoder needs a clinical record")
        x = np.asarray(clinical, dtype=np.float64).reshape(1, -1)
        if x.shape[1] != self.d_in:
            raise DimensionError(f"clinical record length {x.shape[1]} != encoder input {self.d_in}")
        y = relu(self.fc(x))
        return y[0], (x, y)

    def backward(self, cache, g, accumulate=True):
        x, y = cache
        self.fc.backward(x, relu_backward(y, g.reshape(1, -1)), accumulate)


class PromptPath:
    """Shared learnable prompt mapped through a small MLP to a substitute feature."""

    kind = "prompt"

    def __init__(self, params, name, dims: ModelDims, out_dim: int, rng):
        L = dims.prompt_length
        if L < 1:
            raise ConfigError("prompt_length must be >= 1")
        init = glorot(rng.substream(f"{name}.x"), 1, L)[0] if rng is not None else np.zeros(L)
        self.prompt = params.new(f"{name}.x", init)
        self.mapper = MLP(params, f"{name}.map", [L, *dims.prompt_hidden, out_dim], rng)
        self.out_dim = out_dim

    def forward(self, bag=None, clinical=None):
        y, acts = self.mapper.forward(self.prompt.value.reshape(1, -1))
        return y[0], acts

    def backward(self, cache, g, accumulate=True):
        if not accumulate:
            return
        gx = self.mapper.backward(cache, g.reshape(1, -1))
        self.prompt.grad += gx[0]


# ---------------------------------------------------------------------------
# branches


@dataclass
class BranchOutputs:
    feats: list          # one feature vector per path, in fused order
    fused: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    tape: list           # per-path caches

    @property
    def image_feat(self):
        return self.feats[0]

    @property
    def clinical_feat(self):
        return self.feats[-1]


class Branch:
    """Classifier over concatenated path features, with an optional projection
    head on one path (the distillation head M)."""

    def __init__(self, name: str, paths: list, dims: ModelDims, params: ParamStore,
                 rng: RngStream | None, proj_slot: int | None = None):
        self.name = name
        self.paths = paths
        self.dims = dims
        self.params = params
        widths = [p.out_dim for p in paths]
        self.offsets = np.cumsum([0, *widths])
        self.cls = Linear(params, f"{name}.cls", int(self.offsets[-1]), dims.n_classes, rng)
        self.proj_slot = proj_slot
        self.proj = None
        if proj_slot is not None:
            self.proj = Linear(params, f"{name}.proj", widths[proj_slot], dims.proj_dim, rng)

    def forward(self, bag=None, clinical=None) -> BranchOutputs:
        feats, tape = [], []
        for path in self.paths:
            f, c = path.forward(bag, clinical)
            feats.append(f)
            tape.append(c)
        fused = np.concatenate(feats)
        logits = self.cls(fused.reshape(1, -1))[0]
        return BranchOutputs(feats, fused, logits, softmax_temp(logits), tape)

    def slot(self, g_fused, i):
        return g_fused[self.offsets[i]:self.offsets[i + 1]]

    def cls_backward(self, out: BranchOutputs, g_logits, accumulate=True) -> np.ndarray:
        return self.cls.backward(out.fused.reshape(1, -1), g_logits.reshape(1, -1), accumulate)[0]

    def paths_backward(self, out: BranchOutputs, g_fused, only=None):
        for i, path in enumerate(self.paths):
            if only is not None and i not in only:
                continue
            g = self.slot(g_fused, i)
            if np.any(g):
                path.backward(out.tape[i], g)

    def project(self, feat):
        return self.proj(np.asarray(feat).reshape(1, -1))[0]

    def proj_backward(self, feat, g, accumulate=True):
        return self.proj.backward(np.asarray(feat).reshape(1, -1), g.reshape(1, -1), accumulate)[0]

    @property
    def kept_slot(self):
        return self.proj_slot

    def prompt_slots(self):
        return [i for i, p in enumerate(self.paths) if p.kind == "prompt"]

    def prompt_param_names(self):
        return [n for n in self.params if n.startswith(f"{self.name}.prompt")]

    def needs(self):
        return {p.kind for p in self.paths} - {"prompt"}

    def predict(self, bag=None, clinical=None):
        return self.forward(bag, clinical).probs

    def clone(self) -> "Branch":
        return copy.deepcopy(self)


def _slot_of(role):
    # fused order is always [image, clinical]; the role names the slot a prompt fills
    return {"clinical": 1, "image": 0}[role]


def build_multimodal(dims: ModelDims, rng: RngStream | None, role="clinical", name="mul",
                     with_proj=True) -> Branch:
    check_role(role)
    params = ParamStore()
    paths = [ImageEncoder(params, f"{name}.img", dims, rng), ClinicalEncoder(params, f"{name}.cli", dims, rng)]
    kept = 1 - _slot_of(role)
    return Branch(name, paths, dims, params, rng, proj_slot=kept if with_proj else None)


def build_singlemodal(dims: ModelDims, rng: RngStream | None, role="clinical", name="sgl") -> Branch:
    check_role(role)
    params = ParamStore()
    if role == "clinical":
        paths = [ImageEncoder(params, f"{name}.img", dims, rng),
                 PromptPath(params, f"{name}.prompt", dims, dims.d_cf, rng)]
    else:
        paths = [PromptPath(params, f"{name}.prompt", dims, dims.d_h, rng),
                 ClinicalEncoder(params, f"{name}.cli", dims, rng)]
    return Branch(name, paths, dims, params, rng, proj_slot=1 - _slot_of(role))


def build_wsi_missing_variant(dims: ModelDims, rng, role="image", name="sgl") -> Branch:
    """Single branch for the missing-image setting: clinical encoder plus a prompt
    mapped straight to a pooled-image-sized feature."""
    if role != "image":
        raise ConfigError(f"the image-missing variant needs missing_role='image', got {role!r}")
    return build_singlemodal(dims, rng, role="image", name=name)


def build_image_only(dims, rng, name="img_only") -> Branch:
    params = ParamStore()
    return Branch(name, [ImageEncoder(params, f"{name}.img", dims, rng)], dims, params, rng)


def build_clinical_only(dims, rng, name="cli_only") -> Branch:
    params = ParamStore()
    return Branch(name, [ClinicalEncoder(params, f"{name}.cli", dims, rng)], dims, params, rng)


def attention_pool(patch_feats, head: MLP):
    """Pool a t x d_h array of patch features with the attention head ``head``.

    Returns the pooled vector and the t attention weights (a softmax over the
    head's per-patch logits).
    """
    f = np.asarray(patch_feats, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise EmptyBagError("attention pooling needs at least one patch")
    logits, _ = head.forward(f)
    w = softmax_temp(logits[:, 0])
    return w @ f, w


# ---------------------------------------------------------------------------
# the two-branch model and routing


class BDModel:
    """Multi-modal branch + single-modal branch with presence-based routing."""

    def __init__(self, dims: ModelDims, rng: RngStream | None, role="clinical"):
        self.role = check_role(role)
        self.dims = dims
        self.multi = build_multimodal(dims, rng.substream("mul") if rng else None, role)
        self.single = build_singlemodal(dims, rng.substream("sgl") if rng else None, role)

    @property
    def params(self) -> ParamStore:
        return ParamStore.merge(self.multi.params, self.single.params)

    def route(self, sample) -> str:
        img, cli = sample.image_present, sample.clinical_present
        if img and cli:
            return "multi"
        kept_present = cli if self.role == "image" else img
        if kept_present:
            return "single"
        raise UnroutableSampleError(f"sample {sample.sample_id!r} has no usable modality for role {self.role!r}")

    def predict(self, sample):
        return route_inference(sample, self.multi, self.single, self.role)


def route_inference(sample, multi: Branch, single: Branch, role="clinical"):
    """Multi-modal branch when both modalities are present, otherwise the single branch."""
    img, cli = sample.image_present, sample.clinical_present
    if img and cli:
        return multi.forward(sample.bag, sample.clinical).probs
    if role == "clinical" and img:
        return single.forward(sample.bag, None).probs
    if role == "image" and cli:
        return single.forward(None, sample.clinical).probs
    raise UnroutableSampleError(f"sample {sample.sample_id!r} has no usable modality for role {role!r}")


def export_features(branch: Branch, samples, path):
    """Write sample_id,label,f0..f{d-1} of each sample's image-slot feature."""
    rows = []
    width = None
    for s in samples:
        out = branch.forward(s.bag if s.image_present else None, s.clinical if s.clinical_present else None)
        f = out.image_feat
        width = len(f)
        rows.append(",".join([str(s.sample_id), str(int(s.label)), *(repr(float(v)) for v in f)]))
    header = ",".join(["sample_id", "label", *(f"f{i}" for i in range(width or 0))])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for r in rows:
            fh.write(r + "\n")
