"""End-to-end acceptance checks.

Every test prints one line ``PASS|FAIL criterion N: ...`` with the measured
values, then asserts.  The synthetic-data criteria use the default generator
settings and a desk training preset (lr 1e-2, at most 30 epochs, patience 8)
so the whole module finishes in a few minutes on one CPU.
"""
import itertools
import time
from fractions import Fraction

import numpy as np
import pytest

from bidistill.cli import ablation_variants, main
from bidistill.data import Standardizer, SynthConfig, apply_missingness, split_dataset, synth_generate
from bidistill.evalkit import auc, evaluate, f1_macro, sweep_missing_rates
from bidistill.gradcheck import max_error, run_all
from bidistill.losses import sgl_f_only_backward
from bidistill.numcore import RngStream
from bidistill.train import TrainConfig, train_baseline, train_bd

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)
RATES = (0.0, 0.5, 0.8, 1.0)
CACHE = {}


def desk(seed, **kw):
    return TrainConfig(lr=1e-2, max_epochs=30, patience=8, seed=seed, **kw)


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, f"criterion {n}: {detail}"


def splits(seed):
    if ("data", seed) not in CACHE:
        tr, va, te = split_dataset(synth_generate(SynthConfig(seed=seed)), seed=seed)
        st = Standardizer.fit(tr)
        CACHE["data", seed] = (st.apply(tr), st.apply(va), st.apply(te))
    return CACHE["data", seed]


def trained(method, seed, role="clinical"):
    key = (method, seed, role)
    if key not in CACHE:
        tr, va, _ = splits(seed)
        cfg = desk(seed, missing_role=role)
        CACHE[key] = (train_bd(tr, va, cfg) if method == "bd" else train_baseline(method, tr, va, cfg))[0]
    return CACHE[key]


def mean_by(reports, metric="auc"):
    out = {}
    for r in reports:
        out.setdefault((r.method, r.missing_rate), []).append(getattr(r, metric))
    return {k: float(np.mean(v)) for k, v in out.items()}


# ---------------------------------------------------------------------------


def test_criterion_1_gradients(capsys):
    t = time.process_time()
    results = run_all(seed=0, tol=1e-4)
    elapsed = time.process_time() - t
    worst = max_error(results)
    ok = all(r.ok for r in results) and worst < 1e-4 and elapsed < 30
    verdict(capsys, 1, ok, f"{len(results)} losses, max rel err {worst:.2e} (< 1e-4), cpu {elapsed:.1f}s (< 30s)")


def test_criterion_2_freezing_and_masking(capsys, small_data):
    tr, va, _ = small_data
    for role in ("clinical", "image"):
        cfg = TrainConfig(d_h=8, expansion=2, prompt_length=3, lr=1e-2, max_epochs=5, patience=5,
                          check_freezing=True, missing_role=role)
        model, log = train_bd(tr[:30], va, cfg)
        assert len(log.rows) == 5
        CACHE["toy", role] = model
    leaks = 0
    for role in ("clinical", "image"):
        m = CACHE["toy", role]
        prompt = set(m.single.prompt_param_names())
        for s in tr[:10]:
            m.params.zero_grad()
            sgl_f_only_backward(m.single, m.multi, s, 1.2)
            leaks += sum(int(p.grad.any()) for n, p in m.params.items() if n not in prompt)
    verdict(capsys, 2, leaks == 0,
            f"5-epoch runs for both roles kept every freeze digest; {leaks} non-prompt params with distill grad")


def _pairwise(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def _confusion_f1(scores, labels):
    pred = (scores >= 0.5).astype(int)
    cm = [[0, 0], [0, 0]]
    for y, p in zip(labels, pred):
        cm[y][p] += 1
    f = []
    for c in (0, 1):
        tp, fp, fn = cm[c][c], cm[1 - c][c], cm[c][1 - c]
        f.append(Fraction(0) if tp == 0 else Fraction(2 * tp, 2 * tp + fp + fn))
    return float((f[0] + f[1]) / 2)


def test_criterion_3_metric_oracles(capsys):
    rng = RngStream(0, "acceptance").substream("metrics")
    auc_bad = f1_bad = 0
    for i in range(500):
        r = rng.substream(str(i))
        n = int(r.integers(2, 201))
        labels = r.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        scores = r.integers(0, int(r.integers(2, 30)), size=n) / 10.0
        auc_bad += auc(scores, labels) != _pairwise(scores, labels)
        f1_bad += f1_macro(scores, labels) != _confusion_f1(scores, labels)
    verdict(capsys, 3, auc_bad == 0 and f1_bad == 0,
            f"500 tied instances: {auc_bad} AUC and {f1_bad} F1 mismatches against the oracles")


def test_criterion_4_table_trends(capsys):
    t = time.process_time()
    reports = []
    for sd in SEEDS:
        models = {"bd": trained("bd", sd), "filling": trained("filling", sd)}
        reports += sweep_missing_rates(models, splits(sd)[2], RATES, [sd], ci_resamples=100)
    elapsed = time.process_time() - t
    m = mean_by(reports)
    gaps = {r: m["bd", r] - m["filling", r] for r in RATES}
    a = gaps[0.8] >= 0.02 and gaps[1.0] >= 0.02
    b = gaps[0.0] >= -0.01
    fill = [m["filling", r] for r in RATES]
    c = all(y <= x + 0.01 for x, y in zip(fill, fill[1:]))
    detail = ("BD-Filling AUC gap " + ", ".join(f"{r}: {gaps[r]:+.4f}" for r in RATES)
              + f"; Filling AUC {[round(v, 4) for v in fill]}; (a) {a} (b) {b} (c) {c}; cpu {elapsed:.0f}s")
    verdict(capsys, 4, a and b and c and elapsed < 900, detail)


def test_criterion_5_direction_ablation(capsys):
    reports = []
    for sd in SEEDS:
        tr, va, te = splits(sd)
        cfg = desk(sd)
        # the full model of this seed is the one criterion 4 trained with the same config
        cached = trained("bd", sd)
        variants = [(n, c) for n, c in ablation_variants("directions", cfg) if n != "both"]
        for name, vcfg in variants:
            model, _ = train_bd(tr, va, vcfg)
            reports += [evaluate(name, model, te, r, sd, "clinical", 100) for r in (0.0, 0.8)]
        reports += [evaluate("both", cached, te, r, sd, "clinical", 100) for r in (0.0, 0.8)]
    f1 = mean_by(reports, "f1")
    a = f1["s2m", 0.0] >= f1["neither", 0.0] - 0.005
    b = f1["m2s", 0.8] >= f1["neither", 0.8] + 0.01
    detail = (f"rate 0: S->M {f1['s2m', 0.0]:.4f} vs none {f1['neither', 0.0]:.4f} (need >= -0.005); "
              f"rate 0.8: M->S {f1['m2s', 0.8]:.4f} vs none {f1['neither', 0.8]:.4f} "
              f"(diff {f1['m2s', 0.8] - f1['neither', 0.8]:+.6f}, need >= +0.01); both {f1['both', 0.8]:.4f}")
    verdict(capsys, 5, a and b, detail)


class _Fixed:
    def __init__(self, fn):
        self.fn = fn

    def predict(self, s):
        return self.fn(s)


def test_criterion_6_routing_equalities(capsys):
    model = trained("bd", 0)
    te = splits(0)[2]
    multi = _Fixed(lambda s: model.multi.forward(s.bag, s.clinical).probs)
    single = _Fixed(lambda s: model.single.forward(s.bag, None).probs)
    same0 = evaluate("x", model, te, 0.0, 0, ci_resamples=100) == evaluate("x", multi, te, 0.0, 0, ci_resamples=100)
    same1 = evaluate("x", model, te, 1.0, 0, ci_resamples=100) == evaluate("x", single, te, 1.0, 0, ci_resamples=100)
    bits0 = all(np.array_equal(model.predict(s), multi.predict(s)) for s in te)
    bits1 = all(np.array_equal(model.predict(s), single.predict(s)) for s in apply_missingness(te, 1.0))
    verdict(capsys, 6, same0 and same1 and bits0 and bits1,
            f"rate 0 == multi-only: {same0 and bits0}; rate 1 == single-only: {same1 and bits1}")


def test_criterion_7_determinism(capsys, tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--seed", "11"]) == 0
    preset = ["--set", "lr=0.01", "--set", "max_epochs=30", "--set", "patience=8"]
    outs = []
    for k in ("a", "b"):
        tr, ev = tmp_path / f"train_{k}", tmp_path / f"eval_{k}"
        assert main(["train", "--method", "bd", "--data", str(data), "--out", str(tr), "--seed", "11"] + preset) == 0
        assert main(["eval", "--checkpoint", str(tr / "model.bdck"), "--data", str(data), "--out", str(ev),
                     "--seeds", "11", "--ci-resamples", "200"]) == 0
        outs.append(((tr / "model.bdck").read_bytes(), (ev / "report.csv").read_bytes()))
    same_ck = outs[0][0] == outs[1][0]
    same_csv = outs[0][1] == outs[1][1]
    verdict(capsys, 7, same_ck and same_csv,
            f"checkpoints identical: {same_ck} ({len(outs[0][0])} bytes); reports identical: {same_csv}")


def test_criterion_8_missing_image_variant(capsys):
    reports = []
    for sd in SEEDS:
        models = {"bd": trained("bd", sd, "image"), "filling": trained("filling", sd, "image")}
        reports += sweep_missing_rates(models, splits(sd)[2], RATES, [sd], "image", ci_resamples=100)
    m = mean_by(reports)
    per_seed = [round(r.auc, 4) for r in reports if r.missing_rate == 1.0]
    gap = m["bd", 1.0] - m["filling", 1.0]
    verdict(capsys, 8, gap >= 0,
            f"role=image rate 1.0: BD AUC {m['bd', 1.0]:.4f} vs Filling {m['filling', 1.0]:.4f} "
            f"(gap {gap:+.4f}, need >= 0); per-seed BD then Filling {per_seed}")
