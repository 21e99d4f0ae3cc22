"""Two-branch target-attention CTR model with optional LAIN components.

Short branch: target attention over the most recent ``short_window``
behaviours. Long branch: inner-product top-K retrieval (GSU) over the
truncated history followed by target attention (ESU). Both pooled vectors
are fused with the target embedding (and, when any LAIN component is on,
the length embedding) and scored by an MLP head.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import (AttentionResult, AttentionTrace, LengthModulatedAttention, target_attention_base,
                        trace_from_result)
from .data import DEFAULT_BOUNDS, MAX_LEN, Sample, bucket_of
from .length_encoder import SpectralLengthEncoder
from .prompting import PromptBlock, PromptGenerator, prepend_prompts
from .tensor import DimensionError, Parameter, Tensor

PROB_EPS = 1e-7

VARIANTS: dict[str, dict[str, bool]] = {
    "full": {},
    "no-lcp": {"lcp": False},
    "no-qk": {"qk_cond": False},
    "no-temp": {"temp_scale": False},
    "no-lma": {"lma": False},
    "no-short": {"short_branch": False},
    "baseline": {"lcp": False, "lma": False},
}


class VocabularyError(KeyError):
    """Embedding lookup outside the vocabulary."""


@dataclass
class ModelConfig:
    vocab_size: int = 5001
    d: int = 64
    d_f: int = 32
    k: int = 4
    hidden: int = 512
    short_window: int = 20
    gsu_topk: int = 50
    max_len: int = MAX_LEN
    head_dims: tuple[int, ...] = (128, 64)
    dropout: float = 0.2
    gamma: float = 0.5
    beta: float = 0.01
    L0: float = 147.0
    lcp: bool = True
    qk_cond: bool = True
    temp_scale: bool = True
    lma: bool = True
    short_branch: bool = True
    bucket_bounds: tuple[int, int] = DEFAULT_BOUNDS
    n_heads: int = 1

    def __post_init__(self):
        self.head_dims = tuple(int(h) for h in self.head_dims)
        self.bucket_bounds = tuple(int(b) for b in self.bucket_bounds)
        if not self.lma:
            self.qk_cond = False
            self.temp_scale = False
        if len(self.bucket_bounds) != 2 or self.bucket_bounds[0] >= self.bucket_bounds[1]:
            raise ValueError(f"bucket_bounds must be two strictly increasing values, got {self.bucket_bounds}")
        if self.n_heads != 1:
            raise ValueError("only single-head attention is supported")
        for name in ("d", "d_f", "k", "hidden", "short_window", "gsu_topk", "max_len", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def uses_lain(self) -> bool:
        return self.lcp or self.lma

    def with_variant(self, variant: str) -> "ModelConfig":
        if variant not in VARIANTS:
            raise KeyError(f"unknown variant {variant!r}; valid: {', '.join(VARIANTS)}")
        flags = dict(lcp=True, qk_cond=True, temp_scale=True, lma=True, short_branch=True)
        flags.update(VARIANTS[variant])
        return replace(self, **flags)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_dims"] = list(self.head_dims)
        d["bucket_bounds"] = list(self.bucket_bounds)
        return d


# embeddings / retrieval -----------------------------------------------------------

class EmbeddingTable:
    """Item embeddings; row 0 is padding, stays zero and never receives gradient.

    Rows start uniform with unit variance, so ``q . k / sqrt(d)`` starts at
    unit scale and item vectors match the scale of the length embedding.
    """

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator, name: str = "item_emb"):
        rows = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=(vocab_size, dim))
        rows[0] = 0.0
        self.param = T.new_param(name, rows)
        self.vocab_size, self.dim = vocab_size, dim

    def zero_padding_grad(self) -> None:
        if self.param.grad is not None:
            self.param.grad[0] = 0.0


def embed_sequence(ids, table: EmbeddingTable) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        bad = ids[(ids < 0) | (ids >= table.vocab_size)][0]
        raise VocabularyError(f"item id {int(bad)} outside vocabulary of size {table.vocab_size}")
    return T.take_rows(table.param.tensor, ids)


def _topk_positions(scores: np.ndarray, valid: np.ndarray, topk: int) -> np.ndarray:
    """Positions of the ``topk`` highest valid scores, returned in chronological order.

    Ties go to the more recent position.
    """
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return idx
    s = scores[idx]
    order = np.lexsort((-idx, -s))[:topk]
    return np.sort(idx[order])


def gsu_retrieve(target_emb, seq_emb, mask, topk: int) -> tuple[np.ndarray, np.ndarray]:
    """Hard inner-product search: keep the ``topk`` valid rows most aligned with the target."""
    if topk < 1:
        raise ValueError("topk must be >= 1")
    t = np.asarray(target_emb.data if isinstance(target_emb, Tensor) else target_emb, dtype=np.float64)
    e = np.asarray(seq_emb.data if isinstance(seq_emb, Tensor) else seq_emb, dtype=np.float64)
    mask = np.ones(e.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    pos = _topk_positions(e @ t, mask, topk)
    return pos, e[pos]


# batching ---------------------------------------------------------------------------

@dataclass
class Batch:
    user_ids: np.ndarray
    targets: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray
    short_ids: np.ndarray
    short_mask: np.ndarray
    hist_ids: np.ndarray
    hist_mask: np.ndarray

    def __len__(self) -> int:
        return int(self.targets.shape[0])


def make_batch(samples: Sequence[Sample], short_window: int, max_len: int = MAX_LEN) -> Batch:
    n = len(samples)
    hist_len = [min(len(s.behavior_ids), max_len) for s in samples]
    width = max(max(hist_len, default=0), 1)
    hist = np.zeros((n, width), dtype=np.int64)
    short = np.zeros((n, short_window), dtype=np.int64)
    for i, s in enumerate(samples):
        h = np.asarray(s.behavior_ids[-max_len:], dtype=np.int64) if hist_len[i] else np.zeros(0, np.int64)
        hist[i, :h.size] = h
        tail = h[-short_window:]
        short[i, :tail.size] = tail
    return Batch(
        user_ids=np.asarray([s.user_id for s in samples]),
        targets=np.asarray([s.target_item_id for s in samples], dtype=np.int64),
        lengths=np.asarray([s.raw_length for s in samples], dtype=np.float64),
        labels=np.asarray([s.label for s in samples], dtype=np.float64),
        short_ids=short,
        short_mask=short != 0,
        hist_ids=hist,
        hist_mask=hist != 0,
    )


# model ------------------------------------------------------------------------------

@dataclass
class ForwardOutput:
    p: Tensor
    logit: Tensor
    traces: list[AttentionTrace] = field(default_factory=list)
    branch_results: dict = field(default_factory=dict)


class CTRModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        c = config
        # separate streams: shared weights are identical across variants at one seed
        rng = np.random.default_rng([seed, 0])
        lain_rng = np.random.default_rng([seed, 2])
        self.dropout_rng = np.random.default_rng([seed, 1])
        self.embedding = EmbeddingTable(c.vocab_size, c.d, rng)
        self.sle = SpectralLengthEncoder(c.d, c.d_f, c.hidden, lain_rng) if c.uses_lain else None
        self.lcp = PromptGenerator(c.d, c.k, c.hidden, lain_rng) if c.lcp else None
        self.lma = (LengthModulatedAttention(c.d, lain_rng, c.gamma, c.beta, c.L0, qk_cond=c.qk_cond,
                                            temp_scale=c.temp_scale) if c.lma else None)
        n_feat = 3 if c.short_branch else 2
        dims = [n_feat * c.d, *c.head_dims, 1]
        self.head: list[tuple[Parameter, Parameter]] = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self.head.append((T.new_param(f"head.{i}.weight", T.glorot_uniform(rng, a, b)),
                              T.new_param(f"head.{i}.bias", np.zeros(b))))
        # length-embedding rows of the first head layer, kept separate so the
        # LAIN-free model is the same computation with this term removed
        self.fusion = (T.new_param("sle.fusion.weight", T.glorot_uniform(lain_rng, c.d, dims[1]))
                       if c.uses_lain else None)

    # parameter registry
    def parameters(self) -> list[Parameter]:
        ps = [self.embedding.param]
        if self.sle is not None:
            ps += self.sle.params()
        if self.lcp is not None:
            ps += self.lcp.params()
        if self.lma is not None:
            ps += self.lma.params()
        if self.fusion is not None:
            ps.append(self.fusion)
        for w, b in self.head:
            ps += [w, b]
        return ps

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.tensor.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        named = self.named_parameters()
        for name, p in named.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name}")
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.tensor.data = arr.copy()
        if strict:
            extra = sorted(set(state) - set(named))
            if extra:
                raise KeyError(f"unexpected parameters {extra}")

    # forward
    def forward(self, batch: Batch, training: bool = False, collect_traces: bool = False) -> ForwardOutput:
        c = self.config
        table = self.embedding.param.tensor
        tgt = embed_sequence(batch.targets, self.embedding)
        h_len = self.sle(batch.lengths).h_len if self.sle is not None else None
        prompts = (self.lcp(_length_embedding(h_len, batch.lengths)) if self.lcp is not None else None)
        e_len = self.lma.length_embedding(h_len) if (self.lma is not None and c.qk_cond) else None

        results: dict[str, AttentionResult] = {}
        pooled = []
        if c.short_branch:
            kv = T.take_rows(table, batch.short_ids)
            results["short"] = self._attend(tgt, kv, batch.short_mask, batch.lengths, h_len, e_len, prompts)
            pooled.append(results["short"].output)
        sub_ids = self.retrieve(tgt.data, batch.hist_ids, batch.hist_mask)
        kv = T.take_rows(table, sub_ids)
        results["long"] = self._attend(tgt, kv, sub_ids != 0, batch.lengths, h_len, e_len, prompts)
        pooled.append(results["long"].output)
        pooled.append(tgt)

        feats = T.concat(pooled, axis=-1)
        w0, b0 = self.head[0]
        z = T.matmul(feats, w0.tensor)
        if self.fusion is not None:
            z = T.add(z, T.matmul(h_len, self.fusion.tensor))
        z = T.add(z, b0.tensor)
        for w, b in self.head[1:]:
            z = T.dropout(T.relu(z), c.dropout, self.dropout_rng, training)
            z = T.linear(z, w.tensor, b.tensor)
        logit = T.reshape(z, (len(batch),))
        p = T.clamped_sigmoid(logit, PROB_EPS)
        out = ForwardOutput(p, logit, branch_results=results)
        if collect_traces:
            out.traces = self.traces(batch, results)
        return out

    __call__ = forward

    def retrieve(self, tgt: np.ndarray, hist_ids: np.ndarray, hist_mask: np.ndarray) -> np.ndarray:
        """Batched GSU: item ids of the top-K history positions per row (0-padded)."""
        topk = self.config.gsu_topk
        n, width = hist_ids.shape
        if width <= topk:
            return np.where(hist_mask, hist_ids, 0)
        # score every vocabulary item once, then index by history ids
        item_scores = self.embedding.param.data @ tgt.T
        scores = np.where(hist_mask, item_scores[hist_ids, np.arange(n)[:, None]], -np.inf)
        pos = np.broadcast_to(np.arange(width), (n, width))
        order = np.lexsort((-pos, -scores), axis=-1)[:, :topk]
        order.sort(axis=1)
        picked = np.take_along_axis(hist_ids, order, axis=1)
        picked = np.where(np.take_along_axis(hist_mask, order, axis=1), picked, 0)
        T.record_switch(picked)
        return picked

    def _attend(self, tgt, kv, mask, lengths, h_len, e_len, prompts: PromptBlock | None) -> AttentionResult:
        c = self.config
        n_prompts = 0
        if prompts is not None:
            kv, mask = prepend_prompts(prompts, kv, mask)
            n_prompts = c.k
        mask = np.array(mask, dtype=bool)
        empty = ~mask.any(axis=-1)
        if empty.any():
            # position 0 is a zero padding row: the branch pools to exactly zero
            mask[empty, 0] = True
        if self.lma is not None:
            res = self.lma(tgt, kv, mask, lengths, h_len, c.qk_cond, c.temp_scale, n_prompts, e_len)
        else:
            res = target_attention_base(tgt, kv, mask, n_prompts)
        if empty.any():
            res.mask = res.mask.copy()
            res.mask[empty, n_prompts:] = False
        return res

    def traces(self, batch: Batch, results: dict[str, AttentionResult]) -> list[AttentionTrace]:
        bounds = self.config.bucket_bounds
        out = []
        for i in range(len(batch)):
            L = int(batch.lengths[i])
            bucket = bucket_of(L, bounds)
            for branch, res in results.items():
                out.append(trace_from_result(res, i, L, bucket, branch, _plain(batch.user_ids[i])))
        return out

    def predict(self, samples: Sequence[Sample], batch_size: int = 1024, collect_traces: bool = False
                ) -> tuple[np.ndarray, list[AttentionTrace]]:
        preds, traces = [], []
        for start in range(0, len(samples), batch_size):
            batch = make_batch(samples[start:start + batch_size], self.config.short_window, self.config.max_len)
            out = self.forward(batch, training=False, collect_traces=collect_traces)
            preds.append(out.p.data.copy())
            traces.extend(out.traces)
        return (np.concatenate(preds) if preds else np.zeros(0)), traces

    def predict_sample(self, sample: Sample) -> tuple[float, list[AttentionTrace]]:
        p, traces = self.predict([sample], collect_traces=True)
        return float(p[0]), traces


def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


def _length_embedding(h_len, lengths):
    from .length_encoder import LengthEmbedding
    return LengthEmbedding(h_len, lengths)


def bce_loss(p, y) -> Tensor:
    """Mean binary cross-entropy; predictions are clipped to [1e-7, 1 - 1e-7]."""
    p = T.as_tensor(p)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"predictions {p.shape} and labels {y.shape} differ in length")
    if not np.all((p.data >= PROB_EPS) & (p.data <= 1 - PROB_EPS)):
        p = _clip(p)
    ll = T.add(T.mul(T.log(p), y), T.mul(T.log(T.add(1.0, T.neg(p))), 1.0 - y))
    return T.neg(T.mean(ll))


def _clip(p: Tensor) -> Tensor:
    inside = (p.data > PROB_EPS) & (p.data < 1 - PROB_EPS)
    return T._result(np.clip(p.data, PROB_EPS, 1 - PROB_EPS), (p,), lambda g: (g * inside,))


# parameter accounting -------------------------------------------------------------------

def _component(name: str) -> str:
    head = name.split(".", 1)[0]
    return head if head in ("sle", "lcp", "lma") else "shared"


def count_parameters(model: CTRModel) -> dict:
    counts = {"shared": 0, "sle": 0, "lcp": 0, "lma": 0}
    for p in model.parameters():
        counts[_component(p.name)] += int(p.data.size)
    total = sum(counts.values())
    lain = counts["sle"] + counts["lcp"] + counts["lma"]
    report = dict(counts, total=total, lain_fraction=lain / total if total else 0.0)
    report["formula"] = closed_form_counts(model.config)
    return report


def closed_form_counts(c: ModelConfig) -> dict:
    """Per-component counts from the layer shapes (documented in the report)."""
    d, df, H, k = c.d, c.d_f, c.hidden, c.k
    n_feat = 3 if c.short_branch else 2
    dims = [n_feat * d, *c.head_dims, 1]
    shared = c.vocab_size * d + sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    sle = (df + (2 * df * H + H) + 2 * H + (H * H + H) + (H * d + d) + d * dims[1]) if c.uses_lain else 0
    lcp = (d * H + H + H * k * d + k * d) if c.lcp else 0
    lma = ((d * d + d + 2 * (2 * d * d)) * c.qk_cond + 2 * c.temp_scale) if c.lma else 0
    return {
        "shared": shared, "sle": sle, "lcp": lcp, "lma": lma,
        "expr": {
            "shared": "V*d + sum_layers(in*out + out)",
            "sle": "d_f + (2*d_f*H + H) + 2*H + (H*H + H) + (H*d + d) + d*h1",
            "lcp": "d*H + H + H*k*d + k*d",
            "lma": "[qk] d*d + d + 2*(2d*d)  +  [temp] 2",
        },
    }


# checkpoints ---------------------------------------------------------------------------

CKPT_MAGIC = b"LAINCKP1"


def save_checkpoint(path: str, model: CTRModel, extra: dict | None = None) -> None:
    """Binary layout: magic, u64 header length, UTF-8 JSON header, float64 LE blobs.

    The header holds ``config``, ``extra`` and ``params`` (a list of
    ``{name, shape, offset, count}``; offsets are in float64 elements from the
    start of the blob section).
    """
    entries, blobs, offset = [], [], 0
    for p in model.parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        entries.append({"name": p.name, "shape": list(p.data.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"config": model.config.to_dict(), "extra": extra or {}, "params": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    body = np.frombuffer(raw[16 + n:], dtype="<f8")
    state = {e["name"]: body[e["offset"]:e["offset"] + e["count"]].reshape(tuple(e["shape"])).astype(np.float64)
             for e in header["params"]}
    return header, state


def config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**d)


def load_checkpoint(path: str) -> tuple[CTRModel, dict]:
    header, state = read_checkpoint(path)
    model = CTRModel(config_from_dict(header["config"]))
    model.load_state_dict(state)
    return model, header
