"""Length-imbalanced synthetic interaction data and JSONL ingestion.

Interaction records are the interchange unit. A record is an impression
(it becomes a training/eval ``Sample``) unless flagged ``impression: false``,
in which case it only contributes to later histories. A sample's history is
every clicked item of the same user with a strictly earlier timestamp.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize, special, stats

log = logging.getLogger(__name__)

BUCKETS = ("short", "medium", "long")
DEFAULT_BOUNDS = (100, 200)
MAX_LEN = 1000
SPLITS = ("train", "valid", "test")


class SpecError(ValueError):
    pass


class DataError(ValueError):
    pass


def bucket_of(L: int, bounds: Sequence[int] = DEFAULT_BOUNDS) -> str:
    """Half-open length buckets: [0, b1) short, [b1, b2) medium, [b2, inf) long."""
    b1, b2 = bounds
    if L < b1:
        return "short"
    if L < b2:
        return "medium"
    return "long"


@dataclass
class CohortSpec:
    name: str
    user_fraction: float
    mean_length: float
    std_length: float
    base_click_rate: float
    click_rate_std: float
    impressions_per_user: float
    interest_dims: float
    # share of behaviours drawn off-interest; larger for less stable cohorts
    behaviour_noise: float = 0.2

    def validate(self) -> None:
        if self.name not in BUCKETS:
            raise SpecError(f"unknown cohort name {self.name!r}; expected one of {BUCKETS}")
        if not 0.0 < self.user_fraction <= 1.0:
            raise SpecError(f"{self.name}: user_fraction must be in (0, 1]")
        if self.mean_length <= 0 or self.std_length <= 0:
            raise SpecError(f"{self.name}: mean_length and std_length must be positive")
        for attr in ("base_click_rate", "click_rate_std"):
            if not 0.0 < getattr(self, attr) < 1.0:
                raise SpecError(f"{self.name}: {attr} must be in (0, 1)")
        if not 0.0 <= self.behaviour_noise < 1.0:
            raise SpecError(f"{self.name}: behaviour_noise must be in [0, 1)")
        if self.impressions_per_user < 1 or self.interest_dims < 1:
            raise SpecError(f"{self.name}: impressions_per_user and interest_dims must be >= 1")


# EBNeRD-small user statistics by history-length group.
DEFAULT_COHORTS = (
    CohortSpec("short", 0.57, 37.1, 26.9, 0.0828, 0.0419, 5.5, 2.5, behaviour_noise=0.515 / 2),
    CohortSpec("medium", 0.18, 144.2, 28.7, 0.0860, 0.0304, 13.4, 3.6, behaviour_noise=0.354 / 2),
    CohortSpec("long", 0.25, 401.4, 183.3, 0.0941, 0.0252, 32.0, 4.6, behaviour_noise=0.268 / 2),
)


def validate_spec(spec: Sequence[CohortSpec]) -> None:
    if not spec:
        raise SpecError("cohort spec is empty")
    for c in spec:
        c.validate()
    names = [c.name for c in spec]
    if len(set(names)) != len(names):
        raise SpecError(f"duplicate cohort names in {names}")
    total = float(np.sum([c.user_fraction for c in spec]))
    if abs(total - 1.0) > 1e-9:
        raise SpecError(f"cohort user fractions sum to {total!r}, expected 1")


def load_spec_file(path: str) -> list[CohortSpec]:
    with open(path) as fh:
        raw = json.load(fh)
    if isinstance(raw, dict):
        raw = raw.get("cohorts", raw)
    try:
        spec = [CohortSpec(**c) for c in raw]
    except TypeError as exc:
        raise SpecError(f"bad cohort entry in {path}: {exc}") from exc
    validate_spec(spec)
    return spec


@dataclass(eq=False)
class Sample:
    user_id: int
    target_item_id: int
    behavior_ids: np.ndarray
    raw_length: int
    label: int
    ts: int = 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.user_id == other.user_id and self.target_item_id == other.target_item_id
                and self.raw_length == other.raw_length and self.label == other.label
                and self.ts == other.ts and np.array_equal(self.behavior_ids, other.behavior_ids))


@dataclass
class Record:
    user_id: int
    item_id: int
    ts: int
    label: int
    impression: bool = True


@dataclass
class DatasetBundle:
    train: list[Sample]
    valid: list[Sample]
    test: list[Sample]
    vocab_size: int
    L0: float
    records: list[Record] = field(repr=False, default_factory=list)
    provenance: dict = field(default_factory=dict)
    digest: str = ""
    split_of: dict = field(repr=False, default_factory=dict)

    def samples(self, split: str) -> list[Sample]:
        return getattr(self, split)


# digest ---------------------------------------------------------------------

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes, h: int = FNV_OFFSET) -> int:
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def canonical_bytes(records: Iterable[Record]) -> bytes:
    lines = [f"{r.user_id}\t{r.item_id}\t{r.ts}\t{r.label}\t{int(r.impression)}\n" for r in records]
    return "".join(lines).encode()


def records_digest(records: Sequence[Record]) -> str:
    return f"{fnv1a_64(canonical_bytes(sorted(records, key=_record_key))):016x}"


def _record_key(r: Record):
    return (r.user_id, r.ts, not r.impression, r.item_id)


# sample construction ----------------------------------------------------------

def samples_from_records(records: Iterable[Record], max_len: int = MAX_LEN
                         ) -> tuple[dict[int, list[Sample]], int]:
    """Group records by user into chronological impression samples.

    Returns samples per user (ordered by time) and the number of records that
    arrived out of timestamp order and had to be re-sorted.
    """
    by_user: dict[int, list[Record]] = {}
    unsorted = 0
    last_ts: dict[int, int] = {}
    for r in records:
        if r.user_id in last_ts and r.ts < last_ts[r.user_id]:
            unsorted += 1
        last_ts[r.user_id] = max(r.ts, last_ts.get(r.user_id, r.ts))
        by_user.setdefault(r.user_id, []).append(r)
    out: dict[int, list[Sample]] = {}
    for uid in sorted(by_user):
        recs = sorted(by_user[uid], key=_record_key)
        clicks: list[int] = []
        click_ts: list[int] = []
        for r in recs:
            if r.label == 1:
                clicks.append(r.item_id)
                click_ts.append(r.ts)
        clicks_arr = np.asarray(clicks, dtype=np.int64)
        click_ts_arr = np.asarray(click_ts, dtype=np.int64)
        user_samples = []
        for r in recs:
            if not r.impression:
                continue
            n = int(np.searchsorted(click_ts_arr, r.ts, side="left"))
            hist = clicks_arr[max(0, n - max_len):n]
            user_samples.append(Sample(uid, r.item_id, hist, n, r.label, r.ts))
        if user_samples:
            out[uid] = user_samples
    return out, unsorted


def temporal_split(per_user: dict[int, list[Sample]]) -> dict[str, list[Sample]]:
    """Last impression -> test, second-to-last -> valid, the rest -> train."""
    splits: dict[str, list[Sample]] = {s: [] for s in SPLITS}
    for uid in sorted(per_user):
        ss = per_user[uid]
        splits["test"].append(ss[-1])
        if len(ss) >= 2:
            splits["valid"].append(ss[-2])
        splits["train"].extend(ss[:-2])
    return splits


def train_mean_length(train: Sequence[Sample]) -> float:
    latest: dict[int, int] = {}
    for s in train:
        latest[s.user_id] = max(latest.get(s.user_id, 0), s.raw_length)
    if not latest:
        raise DataError("no users in the training split")
    return float(np.mean([latest[u] for u in sorted(latest)]))


def bundle_from_splits(splits: dict[str, list[Sample]], records: list[Record], vocab_size: int,
                       provenance: dict, digest: str) -> DatasetBundle:
    if not any(splits.values()):
        raise DataError("no users")
    L0 = train_mean_length(splits["train"]) if splits["train"] else float(
        np.mean([s.raw_length for s in splits["test"]]))
    return DatasetBundle(splits["train"], splits["valid"], splits["test"], vocab_size, L0,
                         records, provenance, digest)


# synthetic generator ----------------------------------------------------------

def _cohort_range(name: str, bounds: Sequence[int], max_len: int) -> tuple[int, int]:
    b1, b2 = bounds
    return {"short": (1, b1 - 1), "medium": (b1, b2 - 1), "long": (b2, max_len)}[name]


def truncnorm_moments(loc: float, scale: float, lo: float, hi: float) -> tuple[float, float]:
    """Mean and std of N(loc, scale^2) truncated to [lo, hi] (closed form)."""
    a, b = (lo - loc) / scale, (hi - loc) / scale
    z = special.ndtr(b) - special.ndtr(a)
    pa, pb = np.exp(-0.5 * a * a) / np.sqrt(2 * np.pi), np.exp(-0.5 * b * b) / np.sqrt(2 * np.pi)
    m = (pa - pb) / z
    var = scale ** 2 * (1.0 + (a * pa - b * pb) / z - m * m)
    return loc + scale * m, float(np.sqrt(max(var, 0.0)))


def calibrated_truncnorm(mean: float, std: float, lo: float, hi: float) -> stats.rv_continuous:
    """Truncated normal on [lo, hi] whose *truncated* mean and std match the targets.

    Falls back to the closest achievable moments when the target std exceeds
    what the interval allows.
    """
    def resid(x):
        m, s = truncnorm_moments(x[0], np.exp(x[1]), lo, hi)
        return [(m - mean) / std, (s - std) / std]

    sol = optimize.least_squares(resid, x0=[mean, np.log(std)], method="lm")
    loc, scale = sol.x[0], float(np.exp(sol.x[1]))
    return stats.truncnorm((lo - loc) / scale, (hi - loc) / scale, loc=loc, scale=scale)


def _split_counts(fractions: Sequence[float], n: int) -> np.ndarray:
    raw = np.asarray(fractions) * n
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass
class GeneratorConfig:
    n_topics: int = 8
    latent_dim: int = 16
    item_noise: float = 0.35
    popularity_exponent: float = 1.2
    on_interest_candidates: float = 0.5
    affinity_scale: float = 8.0
    length_effect: float = 0.6
    bounds: tuple[int, int] = DEFAULT_BOUNDS
    max_len: int = MAX_LEN


def generate_synthetic(spec: Sequence[CohortSpec] = DEFAULT_COHORTS, n_users: int = 2000,
                       n_items: int = 5000, seed: int = 0,
                       config: GeneratorConfig | None = None) -> DatasetBundle:
    """Draw a cohort-structured interaction log and wrap it as a bundle.

    Users are allocated to cohorts in exact proportion to ``user_fraction``
    (largest remainder). Click probability is logistic in user-item affinity,
    with an interest slope that grows with history length, a log-length
    activity term, a per-user random intercept sized from ``click_rate_std``,
    and a per-cohort intercept found by bisection so realised cohort click
    propensities match ``base_click_rate``.
    """
    spec = list(spec)
    validate_spec(spec)
    cfg = config or GeneratorConfig()
    if n_users < 1 or n_items < 2:
        raise SpecError("need at least one user and two items")
    rng = np.random.default_rng(seed)

    centres = rng.normal(size=(cfg.n_topics, cfg.latent_dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    item_topic = rng.integers(cfg.n_topics, size=n_items)
    item_vec = centres[item_topic] + cfg.item_noise * rng.normal(size=(n_items, cfg.latent_dim)) / np.sqrt(
        cfg.latent_dim)
    item_vec /= np.linalg.norm(item_vec, axis=1, keepdims=True)
    pop = 1.0 / np.arange(1, n_items + 1) ** cfg.popularity_exponent
    pop = pop[rng.permutation(n_items)]
    global_p = pop / pop.sum()
    topic_items = [np.flatnonzero(item_topic == t) for t in range(cfg.n_topics)]
    topic_p = [pop[ix] / pop[ix].sum() if ix.size else ix for ix in topic_items]

    counts = _split_counts([c.user_fraction for c in spec], n_users)
    cohort_of = rng.permutation(np.repeat(np.arange(len(spec)), counts))

    lengths = np.zeros(n_users, dtype=np.int64)
    for ci, c in enumerate(spec):
        lo, hi = _cohort_range(c.name, cfg.bounds, cfg.max_len)
        members = np.flatnonzero(cohort_of == ci)
        dist = calibrated_truncnorm(c.mean_length, c.std_length, lo - 0.5, hi + 0.5)
        draws = dist.rvs(size=members.size, random_state=rng) if members.size else np.zeros(0)
        lengths[members] = np.clip(np.rint(draws), lo, hi).astype(np.int64)

    users = []
    for uid in range(n_users):
        ci = int(cohort_of[uid])
        c = spec[ci]
        L = int(lengths[uid])
        n_int = int(np.clip(rng.poisson(c.interest_dims - 1) + 1, 1, cfg.n_topics))
        topics = rng.choice(cfg.n_topics, size=n_int, replace=False)
        tw = rng.dirichlet(np.ones(n_int))
        interest = (tw[:, None] * centres[topics]).sum(axis=0)
        interest /= np.linalg.norm(interest)
        behaviours = _draw_items(rng, L, topics, tw, c.behaviour_noise, topic_items, topic_p, global_p)
        n_imp = int(rng.poisson(c.impressions_per_user - 1)) + 1
        cands = _draw_items(rng, n_imp, topics, tw, 1.0 - cfg.on_interest_candidates,
                            topic_items, topic_p, global_p)
        users.append(dict(uid=uid, cohort=ci, L=L, interest=interest, behaviours=behaviours, cands=cands,
                          user_effect=rng.normal()))

    # label logits; per-cohort intercept solved on the realised draws
    mean_log = np.mean([np.log1p(u["L"]) for u in users])
    base_logits = {ci: [] for ci in range(len(spec))}
    for u in users:
        c = spec[u["cohort"]]
        p = c.base_click_rate
        user_sd = c.click_rate_std / (p * (1.0 - p))
        slope = cfg.affinity_scale * (0.4 + 0.6 * (1.0 - np.exp(-u["L"] / 60.0)))
        aff = item_vec[u["cands"]] @ u["interest"]
        u["logit"] = (slope * aff + cfg.length_effect * (np.log1p(u["L"]) - mean_log)
                      + user_sd * u["user_effect"])
        base_logits[u["cohort"]].append(u["logit"])
    offsets = {}
    for ci, parts in base_logits.items():
        z = np.concatenate(parts) if parts else np.zeros(0)
        target = spec[ci].base_click_rate
        if z.size == 0:
            offsets[ci] = float(_logit(target))
            continue
        offsets[ci] = optimize.brentq(lambda b: float(np.mean(_sigmoid(z + b))) - target, -30.0, 30.0)

    records: list[Record] = []
    split_of: dict[tuple[int, int], str] = {}
    for u in users:
        uid, L = u["uid"], u["L"]
        for t, item in enumerate(u["behaviours"]):
            records.append(Record(uid, int(item) + 1, t, 1, False))
        probs = _sigmoid(u["logit"] + offsets[u["cohort"]])
        labels = (rng.random(len(probs)) < probs).astype(int)
        n_imp = len(probs)
        for j, (item, y) in enumerate(zip(u["cands"], labels)):
            ts = L + j
            records.append(Record(uid, int(item) + 1, ts, int(y), True))
            split_of[(uid, ts)] = "test" if j == n_imp - 1 else "valid" if j == n_imp - 2 else "train"

    per_user, _ = samples_from_records(records, cfg.max_len)
    splits = temporal_split(per_user)
    provenance = {
        "source": "synthetic",
        "seed": seed,
        "n_users": n_users,
        "n_items": n_items,
        "cohorts": [asdict(c) for c in spec],
        "generator": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
        "cohort_users": {spec[ci].name: int(n) for ci, n in enumerate(counts)},
        "cohort_offsets": {spec[ci].name: float(v) for ci, v in offsets.items()},
    }
    bundle = bundle_from_splits(splits, records, n_items + 1, provenance, records_digest(records))
    bundle.split_of = split_of
    return bundle


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def _draw_items(rng, n, topics, weights, noise, topic_items, topic_p, global_p) -> np.ndarray:
    out = np.empty(n, dtype=np.int64)
    off = rng.random(n) < noise
    n_off = int(off.sum())
    if n_off:
        out[off] = rng.choice(len(global_p), size=n_off, p=global_p)
    on_idx = np.flatnonzero(~off)
    if on_idx.size:
        picks = rng.choice(len(topics), size=on_idx.size, p=weights)
        for k, t in enumerate(topics):
            sel = on_idx[picks == k]
            if sel.size:
                items = topic_items[t]
                if items.size == 0:
                    out[sel] = rng.choice(len(global_p), size=sel.size, p=global_p)
                else:
                    out[sel] = rng.choice(items, size=sel.size, p=topic_p[t])
    return out


# JSONL interchange -------------------------------------------------------------

def record_to_json(r: Record, with_flag: bool = True) -> str:
    obj = {"user_id": str(r.user_id), "item_id": str(r.item_id), "ts": int(r.ts), "label": int(r.label)}
    if with_flag and not r.impression:
        obj["impression"] = False
    return json.dumps(obj, sort_keys=True)


def export_jsonl(records: Iterable[Record], path: str) -> None:
    with open(path, "w") as fh:
        for r in sorted(records, key=_record_key):
            fh.write(record_to_json(r) + "\n")


def parse_jsonl(lines: Iterable[str], source: str = "<input>") -> list[dict]:
    rows = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            row = {
                "user_id": str(obj["user_id"]),
                "item_id": str(obj["item_id"]),
                "ts": int(obj["ts"]),
                "label": int(obj["label"]),
                "impression": bool(obj.get("impression", True)),
            }
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{source}:{lineno}: malformed interaction line ({exc})") from exc
        if row["label"] not in (0, 1):
            raise DataError(f"{source}:{lineno}: label must be 0 or 1")
        rows.append(row)
    return rows


def _id_map(values: Iterable[str], start: int) -> dict[str, int]:
    uniq = sorted(set(values))
    if all(v.isdigit() for v in uniq) and all(int(v) >= start for v in uniq):
        return {v: int(v) for v in uniq}
    return {v: i for i, v in enumerate(uniq, start)}


def rows_to_records(rows: list[dict]) -> tuple[list[Record], int]:
    users = _id_map((r["user_id"] for r in rows), 0)
    items = _id_map((r["item_id"] for r in rows), 1)
    recs = [Record(users[r["user_id"]], items[r["item_id"]], r["ts"], r["label"], r["impression"]) for r in rows]
    vocab = max(items.values()) + 1 if items else 1
    return recs, vocab


def load_external(path: str, max_len: int = MAX_LEN, vocab_size: int | None = None) -> DatasetBundle:
    """Load one JSONL interaction file and split each user's impressions by time."""
    with open(path, "rb") as fh:
        raw = fh.read()
    rows = parse_jsonl(raw.decode().splitlines(), path)
    if not rows:
        raise DataError("no users")
    records, vocab = rows_to_records(rows)
    per_user, unsorted = samples_from_records(records, max_len)
    if unsorted:
        log.warning("%s: %d records out of timestamp order were re-sorted", path, unsorted)
    provenance = {"source": os.path.basename(path), "unsorted_records": unsorted}
    return bundle_from_splits(temporal_split(per_user), records, max(vocab, vocab_size or 0), provenance,
                              f"{fnv1a_64(raw):016x}")


DATA_FILES = {"behaviors": "behaviors.jsonl", "train": "train.jsonl", "valid": "valid.jsonl",
              "test": "test.jsonl"}


def write_dataset_dir(bundle: DatasetBundle, out_dir: str) -> dict:
    """Write JSONL splits plus ``manifest.json``; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    groups: dict[str, list[Record]] = {k: [] for k in DATA_FILES}
    for r in sorted(bundle.records, key=_record_key):
        if not r.impression:
            groups["behaviors"].append(r)
        else:
            groups[bundle.split_of.get((r.user_id, r.ts), "train")].append(r)
    files = {}
    for key, name in DATA_FILES.items():
        payload = "".join(record_to_json(r) + "\n" for r in groups[key]).encode()
        with open(os.path.join(out_dir, name), "wb") as fh:
            fh.write(payload)
        files[key] = {"name": name, "records": len(groups[key]), "fnv1a64": f"{fnv1a_64(payload):016x}"}
    manifest = {
        "digest": bundle.digest,
        "vocab_size": bundle.vocab_size,
        "L0": bundle.L0,
        "files": files,
        "samples": {s: len(bundle.samples(s)) for s in SPLITS},
        "provenance": bundle.provenance,
        "cohort_shares": cohort_shares(bundle),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset_dir(path: str, max_len: int = MAX_LEN) -> DatasetBundle:
    """Read a directory written by ``write_dataset_dir``; splits follow the files."""
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    rows, origin = [], []
    for key, name in DATA_FILES.items():
        with open(os.path.join(path, name)) as fh:
            part = parse_jsonl(fh, name)
        rows.extend(part)
        origin.extend([key] * len(part))
    if not rows:
        raise DataError("no users")
    records, vocab = rows_to_records(rows)
    split_of = {(r.user_id, r.ts): o for r, o in zip(records, origin) if r.impression}
    per_user, _ = samples_from_records(records, max_len)
    splits: dict[str, list[Sample]] = {s: [] for s in SPLITS}
    for uid in sorted(per_user):
        for s in per_user[uid]:
            splits[split_of[(s.user_id, s.ts)]].append(s)
    bundle = bundle_from_splits(splits, records, max(vocab, int(manifest.get("vocab_size", 0))),
                                manifest.get("provenance", {}), manifest.get("digest", records_digest(records)))
    bundle.split_of = split_of
    return bundle


def load_data(path: str, max_len: int = MAX_LEN) -> DatasetBundle:
    if os.path.isdir(path):
        return load_dataset_dir(path, max_len)
    return load_external(path, max_len)


def cohort_shares(bundle: DatasetBundle, bounds: Sequence[int] = DEFAULT_BOUNDS) -> dict:
    """User and training-sample shares per length bucket (user bucket from first sample)."""
    first_len: dict[int, int] = {}
    for split in SPLITS:
        for s in bundle.samples(split):
            if s.user_id not in first_len or s.raw_length < first_len[s.user_id]:
                first_len[s.user_id] = s.raw_length
    n_users = max(len(first_len), 1)
    user_counts = {b: 0 for b in BUCKETS}
    for L in first_len.values():
        user_counts[bucket_of(L, bounds)] += 1
    sample_counts = {b: 0 for b in BUCKETS}
    for s in bundle.train:
        sample_counts[bucket_of(first_len[s.user_id], bounds)] += 1
    n_train = max(len(bundle.train), 1)
    return {
        "users": {b: user_counts[b] / n_users for b in BUCKETS},
        "train_samples": {b: sample_counts[b] / n_train for b in BUCKETS},
    }
