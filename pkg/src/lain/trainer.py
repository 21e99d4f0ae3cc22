"""Adam training with early stopping, gradient-conflict probing and experiment matrices."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .backbone import VARIANTS, CTRModel, ModelConfig, bce_loss, count_parameters, make_batch
from .data import BUCKETS, DatasetBundle, Sample, bucket_of, generate_synthetic, load_data
from .metrics import auc, bucketed_report, report_to_json
from .tensor import Parameter

log = logging.getLogger(__name__)


class OptimizerError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: OptimizerState, grads: dict[str, np.ndarray] | None = None
              ) -> OptimizerState:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    trainable = [p for p in params if p.trainable]
    if grads is None:
        grads = {}
        for p in trainable:
            if p.grad is None:
                raise OptimizerError(f"no gradient for parameter {p.name}")
            grads[p.name] = p.grad
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p in trainable:
        if p.name not in grads:
            raise OptimizerError(f"no gradient for parameter {p.name}")
        g = grads[p.name]
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        m, v = state.m[p.name], state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.tensor.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 256
    max_epochs: int = 30
    patience: int = 3
    eval_batch_size: int = 1024
    conflict_probe: bool = False
    probe_size: int = 256


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    valid_auc: float | None
    conflict_cosine: float | None = None
    conflict_inner: float | None = None


def batch_loss(model: CTRModel, samples: Sequence[Sample], training: bool):
    batch = make_batch(samples, model.config.short_window, model.config.max_len)
    out = model.forward(batch, training=training)
    return bce_loss(out.p, batch.labels)


def shared_parameters(model: CTRModel) -> list[Parameter]:
    return [p for p in model.parameters() if p.name.split(".", 1)[0] not in ("sle", "lcp", "lma")]


def conflict_stats(g_short: np.ndarray, g_long: np.ndarray) -> dict:
    inner = float(np.dot(g_short, g_long))
    denom = float(np.linalg.norm(g_short) * np.linalg.norm(g_long))
    return {"inner_product": inner, "cosine": inner / denom if denom > 0 else 0.0}


def shared_gradient(model: CTRModel, samples: Sequence[Sample]) -> np.ndarray:
    model.zero_grad()
    batch_loss(model, samples, training=False).backward()
    model.embedding.zero_padding_grad()
    flat = [(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in shared_parameters(model)]
    model.zero_grad()
    return np.concatenate(flat)


def gradient_conflict_probe(model: CTRModel, batch_short: Sequence[Sample], batch_long: Sequence[Sample]
                            ) -> dict | None:
    """Inner product and cosine of shared-parameter gradients on short- vs long-user batches."""
    if not batch_short or not batch_long:
        log.info("gradient-conflict probe skipped: a probe batch is empty")
        return None
    return conflict_stats(shared_gradient(model, batch_short), shared_gradient(model, batch_long))


def probe_batches(train: Sequence[Sample], bounds, size: int, seed: int) -> tuple[list, list]:
    rng = np.random.default_rng([seed, 7])
    order = rng.permutation(len(train))
    short = [train[i] for i in order if train[i].raw_length < bounds[0]][:size]
    long_ = [train[i] for i in order if train[i].raw_length >= bounds[1]][:size]
    return short, long_


def train(bundle: DatasetBundle, model_config: ModelConfig, train_config: TrainConfig | None = None,
          seed: int = 0) -> tuple[CTRModel, list[EpochLog]]:
    """Train with shuffled mini-batches; return the best-validation-AUC model and the epoch log."""
    tc = train_config or TrainConfig()
    if not bundle.train:
        raise TrainingError("training split is empty")
    model = CTRModel(model_config, seed=seed)
    state = OptimizerState(lr=tc.lr)
    params = model.parameters()
    probes = probe_batches(bundle.train, model_config.bucket_bounds, tc.probe_size, seed) if tc.conflict_probe \
        else None
    history: list[EpochLog] = []
    best_auc, best_state, bad = -np.inf, model.state_dict(), 0
    n = len(bundle.train)
    for epoch in range(1, tc.max_epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, tc.batch_size):
            chunk = [bundle.train[i] for i in order[start:start + tc.batch_size]]
            model.zero_grad()
            loss = batch_loss(model, chunk, training=True)
            loss.backward()
            model.embedding.zero_padding_grad()
            adam_step(params, state)
            total += float(loss.data) * len(chunk)
            count += len(chunk)
        preds, _ = model.predict(bundle.valid, tc.eval_batch_size)
        valid_auc = auc(preds, [s.label for s in bundle.valid]) if bundle.valid else None
        if valid_auc is None:
            raise TrainingError(f"validation AUC undefined at epoch {epoch} "
                                f"({len(bundle.valid)} validation samples; need both classes)")
        rec = EpochLog(epoch, total / count, valid_auc)
        if probes is not None:
            probe = gradient_conflict_probe(model, *probes)
            if probe is not None:
                rec.conflict_cosine, rec.conflict_inner = probe["cosine"], probe["inner_product"]
        history.append(rec)
        log.info("epoch %d loss %.5f valid_auc %.5f", epoch, rec.train_loss, valid_auc)
        if valid_auc > best_auc:
            best_auc, best_state, bad = valid_auc, model.state_dict(), 0
        else:
            bad += 1
            if bad >= tc.patience:
                break
    model.load_state_dict(best_state)
    return model, history


def history_csv(history: Sequence[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "valid_auc", "conflict_cosine"])
    for h in history:
        w.writerow([h.epoch, repr(h.train_loss), repr(h.valid_auc),
                    "" if h.conflict_cosine is None else repr(h.conflict_cosine)])
    return buf.getvalue()


def digest_text(text: str | bytes) -> str:
    data = text.encode() if isinstance(text, str) else text
    return hashlib.sha256(data).hexdigest()[:16]


def evaluate(model: CTRModel, bundle: DatasetBundle, split: str = "test", batch_size: int = 1024) -> dict:
    samples = bundle.samples(split)
    preds, traces = model.predict(samples, batch_size, collect_traces=True)
    report = bucketed_report(preds, [s.label for s in samples], [s.user_id for s in samples],
                             [s.raw_length for s in samples], traces, model.config.bucket_bounds,
                             config=model.config.to_dict(), digest=bundle.digest)
    taus = np.asarray([t.tau for t in traces]) if traces else np.ones(1)
    report["attention"] = {"tau_min": float(taus.min()), "tau_max": float(taus.max()), "n_traces": len(traces)}
    report["parameters"] = {k: v for k, v in count_parameters(model).items() if k != "formula"}
    return report


# experiment matrix -----------------------------------------------------------------

SUMMARY_METRICS = ("auc", "gauc", "logloss", "mean_gini")
LOWER_IS_BETTER = {"logloss", "mean_gini", "gini_variance", "gini_range"}


@dataclass
class Cell:
    name: str
    variant: str = "full"
    overrides: dict = field(default_factory=dict)


@dataclass
class ExperimentPlan:
    variants: list = field(default_factory=lambda: list(VARIANTS))
    seeds: list = field(default_factory=lambda: [0])
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    baseline: str = "baseline"

    def cells(self) -> list[Cell]:
        out = []
        for v in self.variants:
            cell = Cell(v, v) if isinstance(v, str) else Cell(v["name"], v.get("variant", "full"),
                                                               dict(v.get("overrides", {})))
            if cell.variant not in VARIANTS:
                raise KeyError(f"unknown variant {cell.variant!r}; valid: {', '.join(VARIANTS)}")
            out.append(cell)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise KeyError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**d)


def load_plan_data(spec: dict, seed: int) -> DatasetBundle:
    if "path" in spec:
        return load_data(spec["path"])
    data_seed = spec.get("seed", seed)
    return generate_synthetic(n_users=spec.get("n_users", 2000), n_items=spec.get("n_items", 5000),
                              seed=data_seed)


def cell_config(plan: ExperimentPlan, cell: Cell, bundle: DatasetBundle) -> ModelConfig:
    base = dict(plan.model)
    base.update(vocab_size=bundle.vocab_size, L0=bundle.L0)
    cfg = ModelConfig(**base).with_variant(cell.variant)
    return replace(cfg, **cell.overrides) if cell.overrides else cfg


def run_cell(plan: ExperimentPlan, cell: Cell, seed: int, bundle: DatasetBundle) -> tuple[dict, list[EpochLog]]:
    cfg = cell_config(plan, cell, bundle)
    model, history = train(bundle, cfg, TrainConfig(**plan.train), seed=seed)
    report = evaluate(model, bundle)
    report["run"] = {"cell": cell.name, "variant": cell.variant, "seed": seed,
                     "epochs": len(history), "best_valid_auc": max(h.valid_auc for h in history)}
    return report, history


def run_experiment_matrix(plan: ExperimentPlan, out_dir: str | None = None, resume: bool = False) -> dict:
    """Train and evaluate every (cell, seed); write per-run reports and ``summary.csv``.

    Returns ``{"reports": {(cell, seed): report}, "failures": [...], "summary": rows}``.
    With ``resume``, cells already listed as done in ``manifest.json`` are
    read back instead of retrained.
    """
    cells = plan.cells()
    reports: dict[tuple[str, int], dict] = {}
    failures: list[dict] = []
    manifest_path = os.path.join(out_dir, "manifest.json") if out_dir else None
    done: dict[str, str] = {}
    if out_dir:
        os.makedirs(os.path.join(out_dir, "reports"), exist_ok=True)
        if resume and os.path.exists(manifest_path):
            with open(manifest_path) as fh:
                done = json.load(fh).get("completed", {})
    bundles: dict = {}
    for seed in plan.seeds:
        for cell in cells:
            key = f"{cell.name}__seed{seed}"
            if key in done:
                with open(os.path.join(out_dir, done[key])) as fh:
                    reports[(cell.name, seed)] = json.load(fh)
                continue
            try:
                data_key = plan.data.get("seed", seed) if "path" not in plan.data else "path"
                if data_key not in bundles:
                    bundles[data_key] = load_plan_data(plan.data, seed)
                report, _ = run_cell(plan, cell, seed, bundles[data_key])
            except Exception as exc:  # one failed cell must not stop the matrix
                log.exception("run %s failed", key)
                failures.append({"cell": cell.name, "seed": seed, "error": repr(exc)})
                continue
            reports[(cell.name, seed)] = report
            if out_dir:
                rel = os.path.join("reports", f"{key}.json")
                with open(os.path.join(out_dir, rel), "w") as fh:
                    fh.write(report_to_json(report))
                done[key] = rel
                _write_manifest(manifest_path, plan, done, failures)
    rows = summarize(reports, [c.name for c in cells], plan.baseline)
    if out_dir:
        with open(os.path.join(out_dir, "summary.csv"), "w") as fh:
            fh.write(summary_csv(rows))
        _write_manifest(manifest_path, plan, done, failures)
    return {"reports": reports, "failures": failures, "summary": rows}


def _write_manifest(path: str, plan: ExperimentPlan, done: dict, failures: list) -> None:
    with open(path, "w") as fh:
        json.dump({"plan": asdict(plan), "completed": dict(sorted(done.items())), "failures": failures}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")


def _metric(report: dict, bucket: str, metric: str):
    if bucket == "all":
        return report.get(metric)
    return report["buckets"][bucket][metric]


def rel_gain(value: float, base: float, metric: str) -> float:
    """Relative change vs the baseline, in percent (raw sign, as in result tables)."""
    return 100.0 * (value - base) / abs(base)


def summarize(reports: dict, cell_names: Sequence[str], baseline: str = "baseline") -> list[dict]:
    rows = []
    targets = [(b, m) for b in BUCKETS + ("overall",) for m in SUMMARY_METRICS]
    targets += [("all", "gini_variance"), ("all", "gini_range")]
    base_means = {}
    for name in cell_names:
        for bucket, metric in targets:
            vals = [_metric(r, bucket, metric) for (c, _), r in reports.items() if c == name]
            vals = [v for v in vals if v is not None]
            if not vals:
                continue
            mean, std = float(np.mean(vals)), float(np.std(vals))
            if name == baseline:
                base_means[(bucket, metric)] = mean
            rows.append({"variant": name, "bucket": bucket, "metric": metric, "mean": mean, "std": std,
                         "n": len(vals)})
    for row in rows:
        base = base_means.get((row["bucket"], row["metric"]))
        row["rel_gain_vs_baseline"] = (None if base in (None, 0.0)
                                       else rel_gain(row["mean"], base, row["metric"]))
    return rows


def summary_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "bucket", "metric", "mean", "std", "n", "rel_gain_vs_baseline"])
    for r in rows:
        g = r["rel_gain_vs_baseline"]
        w.writerow([r["variant"], r["bucket"], r["metric"], f"{r['mean']:.6f}", f"{r['std']:.6f}", r["n"],
                    "" if g is None else f"{g:+.2f}%"])
    return buf.getvalue()


def bucket_lengths(samples: Sequence[Sample], bounds) -> dict[str, int]:
    counts = {b: 0 for b in BUCKETS}
    for s in samples:
        counts[bucket_of(s.raw_length, bounds)] += 1
    return counts
