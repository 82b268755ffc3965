"""Simulated multimodal RAG victim: knowledge base, exact index, retrieval,
a majority-vote generation stand-in, a label judge, and campaign metrics."""

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .encoders import encode_images, encode_texts
from .errors import ContractError, ParseError
from .records import Report

NORM_TOL = 1e-9
METRIC_FIELDS = ("method", "eps", "k", "asr", "avg_target_count", "n_images", "seed")


@dataclass(frozen=True)
class KnowledgeBase:
    reports: tuple
    labels: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "reports", tuple(self.reports))
        if not self.reports:
            raise ContractError("knowledge base is empty")
        ids = [r.id for r in self.reports]
        if len(set(ids)) != len(ids):
            dup = next(i for i, c in Counter(ids).items() if c > 1)
            raise ContractError(f"duplicate report id {dup!r}")
        present = tuple(sorted({r.label for r in self.reports}))
        if not self.labels:
            object.__setattr__(self, "labels", present)
        missing = set(self.labels) - set(present)
        if missing:
            raise ContractError(f"labels absent from the knowledge base: {sorted(missing)}")
        object.__setattr__(self, "_by_id", {r.id: r for r in self.reports})

    @property
    def counts(self):
        return dict(Counter(r.label for r in self.reports))

    def check_balance(self, per_class):
        bad = {k: v for k, v in self.counts.items() if v != per_class}
        if bad:
            raise ContractError(f"unbalanced knowledge base: {bad} (want {per_class} each)")

    def label_of(self, report_id):
        return self._by_id[report_id].label

    def __len__(self):
        return len(self.reports)

    def dump_jsonl(self, path):
        lines = [json.dumps({"id": r.id, "label": r.label, "text": r.text}) for r in self.reports]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load_jsonl(cls, path, labels=()):
        reports = []
        offset = 0
        for line in Path(path).read_text().splitlines(keepends=True):
            if line.strip():
                try:
                    obj = json.loads(line)
                    reports.append(Report.from_text(obj["id"], obj["label"], obj["text"]))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ParseError(f"bad knowledge-base record: {exc}", offset) from None
            offset += len(line.encode())
        return cls(reports, tuple(labels))


@dataclass(frozen=True)
class EmbeddingIndex:
    victim: str
    ids: tuple
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "ids", tuple(self.ids))
        if m.shape[0] != len(self.ids):
            raise ContractError("index rows and ids disagree")
        if m.size and np.any(np.abs(np.linalg.norm(m, axis=1) - 1.0) > NORM_TOL):
            raise ContractError("index rows must be unit-norm")

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    hits: tuple  # ((report id, score), ...) best first

    @property
    def ids(self):
        return [h[0] for h in self.hits]

    @property
    def scores(self):
        return [h[1] for h in self.hits]

    def to_dict(self):
        return {"query": self.query_id, "hits": [[i, s] for i, s in self.hits]}


def build_index(kb, victim):
    """Exact index over ``kb``; rows are stored in ascending report-id order,
    so the stable top-k breaks score ties by ascending id."""
    order = sorted(kb.reports, key=lambda r: r.id)
    return EmbeddingIndex(victim.name, [r.id for r in order], encode_texts(victim, order))


def _topk_rows(index, queries, k):
    if len(index) == 0:
        raise ContractError("index is empty")
    if k < 1:
        raise ContractError("k must be >= 1")
    scores = np.atleast_2d(queries) @ index.matrix.T
    return scores, kernels.topk_indices(scores, min(k, len(index)))


def retrieve_topk(index, query_emb, k, query_id=""):
    q = np.asarray(query_emb, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise ContractError("query embedding must be unit-norm")
    scores, top = _topk_rows(index, q, k)
    return RetrievalResult(query_id, tuple((index.ids[j], float(scores[0, j])) for j in top[0]))


def fit_input(victim, pixels):
    """The retriever's input adapter: bilinear rescale to the encoder's size."""
    h, w = victim.arch.height, victim.arch.width
    if pixels.shape == (h, w):
        return pixels
    return kernels.bilinear_resize(pixels, h, w)


def retrieve_images(index, victim, images, k):
    """Encode images (any objects with .id and .pixels) and retrieve for each."""
    if not images:
        return []
    v = encode_images(victim, np.stack([fit_input(victim, im.pixels) for im in images]))
    scores, top = _topk_rows(index, v, k)
    return [
        RetrievalResult(im.id, tuple((index.ids[j], float(scores[i, j])) for j in top[i]))
        for i, im in enumerate(images)
    ]


def generate_stub(retrieved, kb):
    """Majority label of the retrieved reports; ties go to the rank-1 label."""
    if not retrieved.hits:
        raise ContractError("nothing retrieved")
    labels = [kb.label_of(i) for i in retrieved.ids]
    counts = Counter(labels)
    best = max(counts.values())
    leaders = {lab for lab, c in counts.items() if c == best}
    if len(leaders) == 1:
        return leaders.pop()
    return next(lab for lab in labels if lab in leaders)


def judge(predicted, target, labels=None):
    if labels is not None:
        for lab in (predicted, target):
            if lab not in labels:
                raise ContractError(f"unknown label {lab!r}")
    return predicted == target


def asr(verdicts):
    verdicts = list(verdicts)
    if not verdicts:
        raise ContractError("no verdicts")
    return sum(bool(v) for v in verdicts) / len(verdicts)


def avg_target_count(retrievals, kb, target_label, k):
    if not retrievals:
        raise ContractError("no retrievals")
    total = 0
    for r in retrievals:
        if len(r.hits) < k:
            raise ContractError(f"retrieval for {r.query_id!r} has {len(r.hits)} < k={k} hits")
        total += sum(kb.label_of(i) == target_label for i in r.ids[:k])
    return total / len(retrievals)


def system_accuracy(images, victim, kb, k, index=None):
    """Fraction of images whose stub prediction equals their own label."""
    if not images:
        raise ContractError("no images")
    if k < 1:
        raise ContractError("k must be >= 1")
    if index is None:
        index = build_index(kb, victim)
    res = retrieve_images(index, victim, images, k)
    return float(np.mean([generate_stub(r, kb) == im.label for r, im in zip(res, images)]))


@dataclass
class MetricsRecord:
    method: str
    eps: float
    seed: int
    target_label: str
    verdicts: dict  # image id -> bool (at the campaign k)
    avg_target_count: dict  # k -> mean count
    k: int = 5
    n_total: int = 0  # images before clean filtering
    victim: str = ""

    def __post_init__(self):
        for kk, v in self.avg_target_count.items():
            if not 0.0 <= v <= kk:
                raise ContractError(f"avg_target_count@{kk} = {v} out of range")

    @property
    def asr(self):
        return asr(self.verdicts.values())

    @property
    def n_images(self):
        return len(self.verdicts)

    def row(self, k=None):
        k = self.k if k is None else k
        return {
            "method": self.method,
            "eps": _fmt(self.eps),
            "k": k,
            "asr": _fmt(self.asr),
            "avg_target_count": _fmt(self.avg_target_count[k]),
            "n_images": self.n_images,
            "seed": self.seed,
        }


def _fmt(x):
    return format(float(x), ".17g")


def metrics_csv(records, path=None):
    buf = io.StringIO()
    w = csv.DictWriter(buf, METRIC_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow(r.row())
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
