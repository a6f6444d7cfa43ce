"""Command-line entry point: ``bidistill {synth,train,eval,ablate,gradcheck}``.

Configuration files are flat ``key = value`` text (``#`` starts a comment).
Flags override file values; the seed falls back to the ``BD_SEED``
environment variable and then to 0.  Every command writes under ``--out`` and
echoes its effective configuration there as ``config.txt``, which can be fed
back through ``--config`` to repeat the run.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric or check failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import checkpoint
from .data import DataError, SynthConfig, Standardizer, by_split, load_manifest, split_dataset, synth_generate, write_dataset
from .evalkit import UndefinedMetricError, emit_report, evaluate, format_table
from .gradcheck import format_results, max_error, run_all
from .model import EmptyBagError, UnroutableSampleError, export_features
from .numcore import ConfigError, DimensionError, NumericError
from .train import BASELINE_KINDS, TrainConfig, train_baseline, train_bd

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
METHODS = ("bd",) + BASELINE_KINDS
STUDIES = ("directions", "prompt-length", "lambda")
PROMPT_LENGTHS = (10, 25, 50, 100, 200)
LAMBDA_GRID = (0.2, 0.4, 0.6, 0.8)
DEFAULT_RATES = "0,0.5,0.8,1.0"


class UsageError(Exception):
    pass


class CheckFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# config files


def _coerce(field: dataclasses.Field, raw: str, key: str):
    typ = field.type if isinstance(field.type, type) else {"int": int, "float": float, "str": str,
                                                            "bool": bool}.get(str(field.type), str)
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError
            return low in ("1", "true", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from None
    return raw


def parse_config_text(text: str, schema, source="<config>") -> dict:
    """Parse ``key = value`` lines against the fields of dataclass ``schema``."""
    fields = {f.name: f for f in dataclasses.fields(schema)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}: line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise UsageError(f"{source}: line {lineno}: unknown key {key!r}; valid keys: {', '.join(sorted(fields))}")
        out[key] = _coerce(fields[key], raw, key)
    return out


def read_config(path, schema) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text, schema, str(path))


def parse_overrides(pairs, schema) -> dict:
    return parse_config_text("\n".join(pairs or []), schema, "--set")


def config_text(obj) -> str:
    lines = []
    for k, v in sorted(dataclasses.asdict(obj).items()):
        if isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def env_seed():
    raw = os.environ.get("BD_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"BD_SEED must be an integer, got {raw!r}") from None


def build_config(schema, args, extra=None):
    """File values, then BD_SEED if the seed is still unset, then flags."""
    values = read_config(getattr(args, "config", None), schema)
    if "seed" not in values:
        s = env_seed()
        if s is not None:
            values["seed"] = s
    values.update(parse_overrides(getattr(args, "set", None), schema))
    values.update(extra or {})
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    try:
        cfg = schema(**values)
        cfg.validate()
    except ConfigError as e:
        raise UsageError(str(e)) from None
    return cfg


# ---------------------------------------------------------------------------
# helpers


def prepare_out(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise UsageError(f"output directory {path} is not empty; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)
    return path


def write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def parse_rates(text):
    try:
        rates = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--rates must be comma-separated numbers, got {text!r}") from None
    if not rates:
        raise UsageError("--rates is empty")
    for r in rates:
        if not 0.0 <= r <= 1.0:
            raise UsageError(f"missing rate {r} lies outside [0, 1]")
    return rates


def parse_seeds(text):
    try:
        seeds = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


def load_splits(data_dir, seed=0):
    """(train, val, test) from a dataset directory; unsplit manifests are split with ``seed``."""
    samples = load_manifest(data_dir)
    if not samples:
        raise DataError(f"{data_dir}: dataset is empty")
    if all(s.split == "" for s in samples):
        return split_dataset(samples, seed=seed)
    return by_split(samples)


def standardize(train, *others):
    st = Standardizer.fit(train)
    return st, st.apply(train), *(st.apply(o) for o in others)


def train_method(method, train, val, cfg: TrainConfig):
    if method == "bd":
        return train_bd(train, val, cfg)
    return train_baseline(method, train, val, cfg)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    extra = {"n": args.n} if args.n is not None else {}
    cfg = build_config(SynthConfig, args, extra)
    out = prepare_out(args.out, args.force)
    samples = synth_generate(cfg)
    train, val, test = split_dataset(samples, seed=cfg.seed)
    split_of = {s.sample_id: name for name, part in (("train", train), ("val", val), ("test", test)) for s in part}
    ordered = [dataclasses.replace(s, split=split_of[s.sample_id]) for s in samples]
    write_dataset(out, ordered)
    write_text(os.path.join(out, "config.txt"), config_text(cfg))
    print(f"wrote {len(ordered)} samples ({len(train)}/{len(val)}/{len(test)} train/val/test) to {out}")
    return EXIT_OK


def cmd_train(args):
    extra = {"missing_role": args.role} if args.role else {}
    cfg = build_config(TrainConfig, args, extra)
    out = prepare_out(args.out, args.force)
    train, val, _ = load_splits(args.data, cfg.seed)
    st, train, val = standardize(train, val)
    model, log = train_method(args.method, train, val, cfg)
    ck = os.path.join(out, "model.bdck")
    checkpoint.save(ck, model, cfg.to_dict(), st)
    write_text(os.path.join(out, "trainlog.csv"), log.to_csv())
    write_text(os.path.join(out, "trainlog.json"), log.to_json())
    write_text(os.path.join(out, "config.txt"), f"# method = {args.method}\n" + config_text(cfg))
    print(f"{args.method}: best epoch {log.best_epoch} of {log.stop_epoch}, "
          f"monitored {log.best_metric:.4f}; checkpoint {ck}")
    return EXIT_OK


def _eval_name(ck, path, seen):
    name = ck.method
    if name in seen:
        name = f"{ck.method}:{os.path.splitext(os.path.basename(os.path.dirname(os.path.abspath(path))))[0]}"
    seen.add(name)
    return name


def cmd_eval(args):
    rates = parse_rates(args.rates)
    seeds = parse_seeds(args.seeds)
    out = prepare_out(args.out, args.force)
    samples = load_manifest(args.data)
    test = [s for s in samples if s.split == args.split] if any(s.split for s in samples) else samples
    if not test:
        raise DataError(f"{args.data}: no samples in split {args.split!r}")
    reports, seen = [], set()
    for path in args.checkpoint:
        ck = checkpoint.load(path)
        if ck.method in ("bd", "filling", "ae") and ck.role != args.role:
            raise UsageError(f"{path}: trained for missing role {ck.role!r} but --role is {args.role!r}")
        name = _eval_name(ck, path, seen)
        data = ck.standardizer.apply(test) if ck.standardizer else test
        for rate in rates:
            for seed in seeds:
                reports.append(evaluate(name, ck.model, data, rate, seed, args.role, args.ci_resamples,
                                        args.confidence))
        if args.export_features and ck.method == "bd":
            export_features(ck.model.multi, data, os.path.join(out, f"features_{name.replace(':', '_')}.csv"))
    emit_report(reports, os.path.join(out, "report"), ("csv", "json", "svg"))
    write_text(os.path.join(out, "config.txt"), "".join(
        [f"checkpoint = {p}\n" for p in args.checkpoint]
        + [f"data = {args.data}\n", f"rates = {args.rates}\n", f"role = {args.role}\n", f"seeds = {args.seeds}\n",
           f"split = {args.split}\n", f"ci_resamples = {args.ci_resamples}\n", f"confidence = {args.confidence!r}\n"]))
    print(format_table(reports), end="")
    return EXIT_OK


def ablation_variants(study, cfg: TrainConfig):
    """(name, config) pairs of one study, all sharing ``cfg`` otherwise."""
    rep = dataclasses.replace
    if study == "directions":
        return [("neither", rep(cfg, lambda_m=0.0, lambda_s=0.0)),
                ("s2m", rep(cfg, lambda_s=0.0)),
                ("m2s", rep(cfg, lambda_m=0.0)),
                ("both", cfg)]
    if study == "prompt-length":
        return [(f"prompt_length={n}", rep(cfg, prompt_length=n)) for n in PROMPT_LENGTHS]
    if study == "lambda":
        out = [(f"lambda_m={v}", rep(cfg, lambda_m=v)) for v in LAMBDA_GRID]
        out += [(f"lambda_s={v}", rep(cfg, lambda_s=v)) for v in LAMBDA_GRID]
        return out
    raise UsageError(f"unknown study {study!r}; expected one of {', '.join(STUDIES)}")


def run_ablation(study, train, val, test, cfg: TrainConfig, seeds, rates, ci_resamples=1000):
    """Train every variant for every seed; returns (reports, per-run training summaries)."""
    reports, runs = [], []
    for name, vcfg in ablation_variants(study, cfg):
        for seed in seeds:
            model, log = train_bd(train, val, dataclasses.replace(vcfg, seed=seed))
            runs.append({"variant": name, "seed": seed, "lambda_m": vcfg.lambda_m, "lambda_s": vcfg.lambda_s,
                         "prompt_length": vcfg.prompt_length, **log.summary()})
            for rate in rates:
                reports.append(evaluate(name, model, test, rate, seed, cfg.missing_role, ci_resamples))
    return reports, runs


def cmd_ablate(args):
    if args.study not in STUDIES:
        raise UsageError(f"unknown study {args.study!r}; expected one of {', '.join(STUDIES)}")
    cfg = build_config(TrainConfig, args, {"missing_role": args.role} if args.role else {})
    rates = parse_rates(args.rates or ("0,0.8" if args.study == "directions" else DEFAULT_RATES))
    seeds = parse_seeds(args.seeds) if args.seeds else [cfg.seed]
    out = prepare_out(args.out, args.force)
    train, val, test = load_splits(args.data, cfg.seed)
    _, train, val, test = standardize(train, val, test)
    reports, runs = run_ablation(args.study, train, val, test, cfg, seeds, rates, args.ci_resamples)
    baseline = {"directions": "neither", "prompt-length": "prompt_length=50",
                "lambda": f"lambda_m={cfg.lambda_m}"}[args.study]
    emit_report(reports, os.path.join(out, "ablation"), ("csv", "json", "svg"), baseline=baseline)
    write_text(os.path.join(out, "runs.json"), json.dumps(runs, indent=2, sort_keys=True) + "\n")
    write_text(os.path.join(out, "config.txt"), f"# study = {args.study}\n" + config_text(cfg))
    print(format_table(reports, baseline), end="")
    return EXIT_OK


def cmd_gradcheck(args):
    seed = args.seed if args.seed is not None else (env_seed() or 0)
    out = prepare_out(args.out, args.force)
    results = run_all(seed, args.tol)
    text = format_results(results) + f"max_rel_err {max_error(results):.3e} tol {args.tol:g}\n"
    write_text(os.path.join(out, "gradcheck.txt"), text)
    print(text, end="")
    failed = [r for r in results if not r.ok]
    if failed:
        names = [f"{r.loss}:{n}" for r in failed for n in r.report.failed]
        raise CheckFailure("gradient check failed for " + ", ".join(names))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="bidistill", description="Bidirectional distillation for a missing modality.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")
        sp.add_argument("--seed", type=int, default=None, help="overrides config and BD_SEED")
        if config:
            sp.add_argument("--config", default=None, help="key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--n", type=int, default=None, help="number of samples")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train one method")
    common(sp)
    sp.add_argument("--method", required=True, choices=METHODS)
    sp.add_argument("--data", required=True, help="dataset directory or manifest")
    sp.add_argument("--role", choices=("clinical", "image"), default=None, help="modality that may be missing")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="missing-rate sweep over checkpoints")
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--checkpoint", required=True, nargs="+")
    sp.add_argument("--data", required=True)
    sp.add_argument("--rates", default=DEFAULT_RATES)
    sp.add_argument("--role", choices=("clinical", "image"), default="clinical")
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--ci-resamples", type=int, default=1000)
    sp.add_argument("--confidence", type=float, default=0.975)
    sp.add_argument("--export-features", action="store_true", help="also write multi-branch pooled image features")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="ablation studies")
    common(sp)
    sp.add_argument("--study", required=True, choices=STUDIES)
    sp.add_argument("--data", required=True)
    sp.add_argument("--rates", default=None)
    sp.add_argument("--seeds", default=None)
    sp.add_argument("--role", choices=("clinical", "image"), default=None)
    sp.add_argument("--ci-resamples", type=int, default=1000)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    common(sp, config=False)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"bidistill {args.command}: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, checkpoint.CheckpointError, EmptyBagError, UnroutableSampleError, DimensionError) as e:
        print(f"bidistill {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (CheckFailure, NumericError, UndefinedMetricError, FloatingPointError) as e:
        print(f"bidistill {args.command}: check failed: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as e:
        print(f"bidistill {args.command}: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
