"""``lain`` command line: data generation, training, evaluation, audits and ablations.

Exit codes: 0 success, 1 internal failure (or a failed check), 2 usage or
validation error. Every command prints its resolved config and the relevant
digests before doing any work.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace

import numpy as np

from . import tensor as T
from .attention import AttentionTrace, read_traces, write_traces
from .backbone import (VARIANTS, CTRModel, DimensionError, ModelConfig, VocabularyError, bce_loss,
                       count_parameters, load_checkpoint, make_batch, save_checkpoint)
from .data import (BUCKETS, DataError, GeneratorConfig, SpecError, bucket_of, fnv1a_64, generate_synthetic,
                   load_data, load_spec_file, write_dataset_dir, DEFAULT_COHORTS)
from .metrics import entropy, gini, report_to_csv, report_to_json
from .trainer import (ExperimentPlan, OptimizerError, TrainConfig, TrainingError, digest_text, evaluate,
                      history_csv, run_experiment_matrix, train)

log = logging.getLogger("lain")

CHECKPOINT_NAME = "model.ckpt"


class UsageError(Exception):
    """Bad flags, config or inputs: reported with exit code 2."""


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# config files ---------------------------------------------------------------------

GRAD_CHECK_DEFAULTS = {"batch_size": 4, "max_per_param": 12, "h": 1e-4, "force_dropout": False,
                       "vocab_size": 5001, "max_history": 12}

SECTIONS = {
    "model": {f.name: f.default for f in fields(ModelConfig)},
    "train": {f.name: f.default for f in fields(TrainConfig)},
    "generator": {f.name: f.default for f in fields(GeneratorConfig)},
    "grad_check": GRAD_CHECK_DEFAULTS,
}


def _coerce(raw: str, default, key: str):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        try:
            return tuple(int(v) for v in raw.replace(",", " ").split())
        except ValueError:
            raise UsageError(f"{key}: expected integers, got {raw!r}") from None
    try:
        return type(default)(raw)
    except ValueError:
        raise UsageError(f"{key}: expected {type(default).__name__}, got {raw!r}") from None


def read_config(path: str | None) -> dict[str, dict]:
    """Section -> {key: value} from an INI file; unknown sections or keys are rejected."""
    if not path:
        return {s: {} for s in SECTIONS}
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    out: dict[str, dict] = {s: {} for s in SECTIONS}
    for section in parser.sections():
        if section not in SECTIONS:
            raise UsageError(f"unknown config section [{section}]; valid: {', '.join(SECTIONS)}")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise UsageError(f"unknown key {key!r} in [{section}]")
            out[section][key] = _coerce(raw, SECTIONS[section][key], f"[{section}] {key}")
    return out


def echo(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str), flush=True)


def _out_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")
    return path


def _write(path: str, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def _load(path: str, max_len: int = 1000):
    if not os.path.exists(path):
        raise UsageError(f"data path {path} does not exist")
    try:
        return load_data(path, max_len)
    except DataError as exc:
        raise UsageError(f"cannot load data from {path}: {exc}") from None


# commands ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = read_config(args.config)
    try:
        spec = load_spec_file(args.spec_file) if args.spec_file else list(DEFAULT_COHORTS)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read spec file {args.spec_file}: {exc}") from None
    except SpecError as exc:
        raise UsageError(f"invalid cohort spec: {exc}") from None
    gen = GeneratorConfig(**cfg["generator"])
    echo({"command": "gen-data", "out": args.out, "users": args.users, "items": args.items, "seed": args.seed,
          "spec": [asdict(c) for c in spec], "generator": asdict(gen)})
    out = _out_dir(args.out)
    try:
        bundle = generate_synthetic(spec, args.users, args.items, args.seed, gen)
    except SpecError as exc:
        raise UsageError(str(exc)) from None
    manifest = write_dataset_dir(bundle, out)
    echo({"dataset_digest": bundle.digest, "files": manifest["files"], "samples": manifest["samples"],
          "L0": bundle.L0, "cohort_shares": manifest["cohort_shares"]})
    return 0


def _model_config(cfg: dict, bundle, variant: str) -> ModelConfig:
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; valid: {', '.join(VARIANTS)}")
    base = dict(cfg["model"])
    base.setdefault("vocab_size", bundle.vocab_size)
    base.setdefault("L0", bundle.L0)
    try:
        return ModelConfig(**base).with_variant(variant)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    if args.variant not in VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}; valid: {', '.join(VARIANTS)}")
    max_len = cfg["model"].get("max_len", 1000)
    bundle = _load(args.data, max_len)
    mcfg = _model_config(cfg, bundle, args.variant)
    tcfg = TrainConfig(**cfg["train"])
    echo({"command": "train", "data": args.data, "variant": args.variant, "seed": args.seed, "out": args.out,
          "model": mcfg.to_dict(), "train": asdict(tcfg), "dataset_digest": bundle.digest})
    out = _out_dir(args.out)
    model, history = train(bundle, mcfg, tcfg, seed=args.seed)
    hist_text = history_csv(history)
    _write(os.path.join(out, "history.csv"), hist_text)
    counts = count_parameters(model)
    meta = {
        "variant": args.variant,
        "seed": args.seed,
        "dataset_digest": bundle.digest,
        "history_digest": digest_text(hist_text),
        "epochs": len(history),
        "best_valid_auc": max(h.valid_auc for h in history),
        "temperature": ({"scaled": True, "gamma": model.lma.temp.gamma, "beta": float(model.lma.temp.beta.data),
                         "L0": model.lma.temp.L0}
                        if model.lma is not None and model.lma.temp is not None else {"scaled": False, "tau": 1.0}),
        "parameters": {k: v for k, v in counts.items() if k != "formula"},
        "parameter_formula": counts["formula"],
    }
    ckpt = os.path.join(out, CHECKPOINT_NAME)
    save_checkpoint(ckpt, model, extra=meta)
    with open(ckpt, "rb") as fh:
        meta["checkpoint_fnv1a64"] = f"{fnv1a_64(fh.read()):016x}"
    meta["config"] = {"model": mcfg.to_dict(), "train": asdict(tcfg)}
    _write(os.path.join(out, "manifest.json"), json.dumps(meta, indent=2, sort_keys=True) + "\n")
    echo({"history_digest": meta["history_digest"], "checkpoint_fnv1a64": meta["checkpoint_fnv1a64"],
          "epochs": meta["epochs"], "best_valid_auc": meta["best_valid_auc"],
          "lain_fraction": meta["parameters"]["lain_fraction"]})
    return 0


def _load_model(path: str):
    if not os.path.exists(path):
        raise UsageError(f"checkpoint {path} does not exist")
    try:
        return load_checkpoint(path)
    except DimensionError as exc:
        raise UsageError(str(exc)) from None
    except (ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def _check_vocab(model: CTRModel, bundle) -> None:
    if bundle.vocab_size > model.config.vocab_size:
        raise UsageError(f"dimension mismatch: data needs item_emb of shape ({bundle.vocab_size}, {model.config.d}) "
                         f"but the checkpoint has ({model.config.vocab_size}, {model.config.d})")


def cmd_eval(args) -> int:
    model, header = _load_model(args.checkpoint)
    bundle = _load(args.data, model.config.max_len)
    echo({"command": "eval", "data": args.data, "checkpoint": args.checkpoint, "out": args.out,
          "model": model.config.to_dict(), "dataset_digest": bundle.digest,
          "checkpoint_dataset_digest": header.get("extra", {}).get("dataset_digest")})
    _check_vocab(model, bundle)
    out = _out_dir(args.out)
    try:
        report = evaluate(model, bundle)
    except VocabularyError as exc:
        raise UsageError(str(exc)) from None
    _write(os.path.join(out, "report.json"), report_to_json(report))
    _write(os.path.join(out, "report.csv"), report_to_csv(report))
    echo({"report_digest": digest_text(report_to_json(report)),
          "overall_auc": report["buckets"]["overall"]["auc"]})
    return 0


def counterfactual_weights(trace: AttentionTrace, tau: float) -> np.ndarray:
    """Re-softmax a trace's recorded behaviour logits at a fixed temperature."""
    if trace.logits is None:
        raise UsageError("counterfactual temperature needs traces with recorded logits")
    z = np.asarray(trace.logits, dtype=np.float64) / tau
    z = np.exp(z - z.max())
    return z / z.sum()


def gini_table(traces, bounds=(100, 200)) -> tuple[str, dict]:
    per = {b: ([], []) for b in BUCKETS}
    for tr in traces:
        if tr.degenerate or len(tr.weights) == 0:
            continue
        bucket = tr.bucket or bucket_of(tr.user_length, bounds)
        per[bucket][0].append(gini(tr.weights))
        per[bucket][1].append(entropy(tr.weights))
    means = {b: (float(np.mean(per[b][0])) if per[b][0] else None) for b in BUCKETS}
    vals = [v for v in means.values() if v is not None]
    summary = {
        "mean_gini": means,
        "gini_variance": float(np.var(vals)) if vals else None,
        "gini_range": float(np.ptp(vals)) if vals else None,
    }
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bucket", "mean_gini", "mean_entropy", "n_traces"])
    for b in BUCKETS:
        ent = float(np.mean(per[b][1])) if per[b][1] else None
        w.writerow([b, "" if means[b] is None else repr(means[b]), "" if ent is None else repr(ent), len(per[b][0])])
    w.writerow(["variance", "" if summary["gini_variance"] is None else repr(summary["gini_variance"]), "", ""])
    w.writerow(["range", "" if summary["gini_range"] is None else repr(summary["gini_range"]), "", ""])
    return buf.getvalue(), summary


def _is_trace_file(path: str) -> bool:
    if os.path.isdir(path):
        return False
    with open(path) as fh:
        for line in fh:
            if line.strip():
                return "weights" in json.loads(line)
    return False


def cmd_audit_attention(args) -> int:
    tau = args.counterfactual_tau
    if tau is not None and tau <= 0:
        raise UsageError("--counterfactual-tau must be positive")
    if not os.path.exists(args.data):
        raise UsageError(f"data path {args.data} does not exist")
    if args.checkpoint is None:
        if not _is_trace_file(args.data):
            raise UsageError("--checkpoint is required unless --data is a traces JSONL file")
        with open(args.data) as fh:
            traces = read_traces(fh)
        with open(args.data, "rb") as fh:
            digest = f"{fnv1a_64(fh.read()):016x}"
        echo({"command": "audit-attention", "traces": args.data, "out": args.out,
              "counterfactual_tau": tau, "traces_digest": digest})
        bounds = (100, 200)
    else:
        model, _ = _load_model(args.checkpoint)
        bundle = _load(args.data, model.config.max_len)
        echo({"command": "audit-attention", "data": args.data, "checkpoint": args.checkpoint, "out": args.out,
              "counterfactual_tau": tau, "model": model.config.to_dict(), "dataset_digest": bundle.digest})
        _check_vocab(model, bundle)
        _, traces = model.predict(bundle.test, collect_traces=True)
        bounds = model.config.bucket_bounds
    if tau is not None:
        traces = [replace(tr, weights=counterfactual_weights(tr, tau), tau=tau) if not tr.degenerate else tr
                  for tr in traces]
    out = _out_dir(args.out)
    with open(os.path.join(out, "traces.jsonl"), "w") as fh:
        write_traces(traces, fh)
    table, summary = gini_table(traces, bounds)
    _write(os.path.join(out, "gini_by_bucket.csv"), table)
    echo(summary)
    return 0


def grad_check_batch(cfg: ModelConfig, n: int, max_history: int, seed: int):
    """A small deterministic batch of short histories with distinct lengths."""
    from .data import Sample

    rng = np.random.default_rng([seed, 11])
    # lengths stay at or below max_history: d/d(omega) scales with L, and at
    # h=1e-4 the central-difference truncation error grows like (L*h)^2
    lengths = [int(L) for L in np.linspace(5, max_history, n).round()]
    samples = []
    for i, L in enumerate(lengths):
        kept = min(L, cfg.max_len)
        hist = rng.integers(1, cfg.vocab_size, size=kept)
        samples.append(Sample(i, int(rng.integers(1, cfg.vocab_size)), hist, L, i % 2, L))
    return make_batch(samples, cfg.short_window, cfg.max_len)


def cmd_grad_check(args) -> int:
    cfg = read_config(args.config)
    gc = {**GRAD_CHECK_DEFAULTS, **cfg["grad_check"]}
    model_kw = {"vocab_size": gc["vocab_size"], **cfg["model"]}
    try:
        mcfg = ModelConfig(**model_kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    echo({"command": "grad-check", "seed": args.seed, "tol": args.tol, "model": mcfg.to_dict(), "grad_check": gc})
    model = CTRModel(mcfg, seed=args.seed)
    if model.lma is not None and model.lma.w_q is not None:
        # the length halves start at zero; give them values so the length path has gradient
        rng = np.random.default_rng([args.seed, 12])
        d = mcfg.d
        for w in (model.lma.w_q, model.lma.w_k):
            w.tensor.data[d:] = T.glorot_uniform(rng, d, d)
    batch = grad_check_batch(mcfg, gc["batch_size"], gc["max_history"], args.seed)
    training = bool(gc["force_dropout"])

    def objective():
        out = model.forward(batch, training=training)
        return bce_loss(out.p, batch.labels)

    try:
        entries = T.grad_check(objective, model.parameters(), h=gc["h"], tol=args.tol,
                               max_per_param=gc["max_per_param"], seed=args.seed)
    except T.OracleInvalidError as exc:
        print(f"oracle invalid: {exc}", file=sys.stderr)
        return 2
    def effective(e: T.GradCheckEntry) -> float:
        return e.recheck_error if e.recheck_error is not None else e.rel_error

    rows: dict[str, list[T.GradCheckEntry]] = {}
    for e in entries:
        rows.setdefault(e.name, []).append(e)
    width = max(len(n) for n in rows)
    print(f"{'parameter':<{width}}  checked  kinks  max_rel_error  status")
    for name, group in rows.items():
        worst = max(effective(e) for e in group)
        kinks = sum(e.kink for e in group)
        status = "FAIL" if any(e.failed for e in group) else "pass"
        print(f"{name:<{width}}  {len(group):>7}  {kinks:>5}  {worst:>13.3e}  {status}")
    overall = max(entries, key=effective)
    failed = [e for e in entries if e.failed]
    rechecked = [e for e in entries if e.recheck_h is not None]
    print(f"max relative error {effective(overall):.3e} at {overall.name}{list(overall.index)}")
    if rechecked:
        print(f"{len(rechecked)} entries crossed a ReLU/clamp/selection switch at h={gc['h']:g} "
              f"and were re-verified with a smaller step")
    if failed:
        print(f"FAILED: {len(failed)} of {len(entries)} entries exceed tol {args.tol:g}; "
              f"worst offender {overall.name}{list(overall.index)}")
        return 1
    print(f"PASSED: {len(entries)} entries within tol {args.tol:g}")
    return 0


def cmd_ablate(args) -> int:
    try:
        with open(args.plan_file) as fh:
            plan = ExperimentPlan.from_dict(json.load(fh))
        plan.cells()
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read plan {args.plan_file}: {exc}") from None
    except (KeyError, TypeError) as exc:
        raise UsageError(f"invalid plan: {exc}") from None
    echo({"command": "ablate", "plan": asdict(plan), "out_dir": args.out_dir, "resume": args.resume})
    out = _out_dir(args.out_dir)
    result = run_experiment_matrix(plan, out, resume=args.resume)
    with open(os.path.join(out, "summary.csv"), "rb") as fh:
        summary_digest = f"{fnv1a_64(fh.read()):016x}"
    echo({"reports": len(result["reports"]), "failures": result["failures"], "summary_fnv1a64": summary_digest})
    return 1 if result["failures"] else 0


# entry point --------------------------------------------------------------------------

def build_parser() -> ArgumentParser:
    p = ArgumentParser(prog="lain", description="Length-adaptive CTR modelling toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    g = sub.add_parser("gen-data", help="generate a synthetic length-imbalanced dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--users", type=int, default=2000)
    g.add_argument("--items", type=int, default=5000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--spec-file")
    g.add_argument("--config", help="INI file; [generator] section")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--variant", default="full")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="bucketed evaluation report for a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit-attention", help="attention Gini by length bucket")
    a.add_argument("--data", required=True, help="dataset, or a traces JSONL file when --checkpoint is omitted")
    a.add_argument("--checkpoint")
    a.add_argument("--out", required=True)
    a.add_argument("--counterfactual-tau", type=float)
    a.set_defaults(func=cmd_audit_attention)

    c = sub.add_parser("grad-check", help="finite-difference check of every model gradient")
    c.add_argument("--config")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_grad_check)

    b = sub.add_parser("ablate", help="run an experiment matrix of variants x seeds")
    b.add_argument("--plan-file", required=True)
    b.add_argument("--out-dir", required=True)
    b.add_argument("--resume", action="store_true")
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, OptimizerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a bug or an environment failure
        log.exception("internal failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
