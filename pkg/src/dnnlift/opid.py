"""Operator identification over assembly opcode sequences.

Mnemonics are segmented into atomic OPs with byte-pair encoding so that
syntactic variants of one operation (``mulps``/``vmulps``) share subword
units.  A per-label linear classifier over hashed n-grams of the atomic-OP
sequence maps each function to a multi-hot operator label vector; fused
functions set several bits, utility functions none.  A second linear head
over the mean of all function feature vectors predicts the compilation
provenance of a whole bundle.

The classifier is deliberately a small deterministic model behind the same
interface a sequence model would use: swap `_features` / `Classifier`
without touching callers.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .bundle import AssemblyFunction, TraceBundle
from .errors import InsufficientLabels, SchemaViolation
from .harness.emit import CorpusEntry

MODEL_MAGIC = b"DLID"
MODEL_VERSION = 1

LABELS = ("Conv", "Dense", "BiasAdd", "Add", "ReLU", "MaxPool", "AvgPool", "LRN",
          "Softmax", "Embedding", "Reshape", "ExpandDims", "Negative", "Sqrt",
          "Multiply", "Divide", "InsertTensor")
PROVENANCES = ("tvm-o0", "tvm-o3", "glow")

FEATURE_DIM = 1 << 14
REVIEW_CONFIDENCE = 0.8


# ---- byte pair encoding ----

@dataclass
class BpeVocab:
    merges: list[tuple[str, str]] = field(default_factory=list)

    def tokenize_word(self, word: str) -> list[str]:
        parts = list(word)
        for left, right in self.merges:
            i = 0
            while i < len(parts) - 1:
                if parts[i] == left and parts[i + 1] == right:
                    parts[i:i + 2] = [left + right]
                else:
                    i += 1
        return parts


def train_bpe(corpus: list[str], num_merges: int) -> BpeVocab:
    """Learn merges from mnemonic frequencies; ties break lexicographically."""
    if not corpus:
        raise SchemaViolation("empty BPE corpus")
    words: dict[str, int] = {}
    for m in corpus:
        words[m] = words.get(m, 0) + 1
    split = {w: list(w) for w in words}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        counts: dict[tuple[str, str], int] = {}
        for w, parts in split.items():
            n = words[w]
            for a, b in zip(parts, parts[1:]):
                counts[(a, b)] = counts.get((a, b), 0) + n
        if not counts:
            break
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] < 2:
            break
        left, right = best[0]
        merges.append((left, right))
        for w, parts in split.items():
            i = 0
            while i < len(parts) - 1:
                if parts[i] == left and parts[i + 1] == right:
                    parts[i:i + 2] = [left + right]
                else:
                    i += 1
    return BpeVocab(merges=merges)


def tokenize_words(vocab: BpeVocab, mnemonics: list[str]) -> list[list[str]]:
    cache: dict[str, list[str]] = {}
    out = []
    for m in mnemonics:
        if m not in cache:
            cache[m] = vocab.tokenize_word(m)
        out.append(cache[m])
    return out


def tokenize(vocab: BpeVocab, function: AssemblyFunction) -> list[str]:
    """Order-preserving atomic-OP sequence of the whole function."""
    return [t for w in tokenize_words(vocab, function.opcode_sequence) for t in w]


def detokenize(token_words: list[list[str]]) -> list[str]:
    return ["".join(w) for w in token_words]


# ---- hashed n-gram features ----

def _fnv1a(data: bytes) -> int:
    h = 0xcbf29ce484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001b3) & 0xFFFFFFFFFFFFFFFF
    return h


def _features(tokens: list[str], dim: int = FEATURE_DIM) -> np.ndarray:
    v = np.zeros(dim, dtype=np.float32)
    for n in (1, 2, 3):
        for i in range(len(tokens) - n + 1):
            key = "\x1f".join(tokens[i:i + n]).encode()
            v[_fnv1a(key) % dim] += 1.0
    norm = float(np.linalg.norm(v))
    if norm > 0:
        v /= norm
    return v


# ---- classifier ----

@dataclass
class OperatorLabelVec:
    bits: list[bool]
    confidences: list[float]
    label_names: tuple[str, ...] = LABELS

    @property
    def labels(self) -> set[str]:
        return {n for n, b in zip(self.label_names, self.bits) if b}

    @property
    def needs_review(self) -> bool:
        set_conf = [c for c, b in zip(self.confidences, self.bits) if b]
        return bool(set_conf) and max(set_conf) < REVIEW_CONFIDENCE


@dataclass
class Classifier:
    vocab: BpeVocab
    labels: tuple[str, ...]
    w_label: np.ndarray      # [dim, n_labels]
    b_label: np.ndarray
    w_prov: np.ndarray       # [dim, 3]
    b_prov: np.ndarray
    hyper: dict


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def train_classifier(corpus: list[CorpusEntry],
                     hyper: dict | None = None) -> Classifier:
    hyper = {"l2": 1e-4, "epochs": 200, "lr": 2.0, "seed": 0,
             "num_merges": 200, **(hyper or {})}
    if not corpus:
        raise InsufficientLabels("empty corpus")
    mnemonics = [m for e in corpus for m in e.function.opcode_sequence]
    vocab = train_bpe(mnemonics, hyper["num_merges"])

    y = np.zeros((len(corpus), len(LABELS)), dtype=np.float32)
    for i, e in enumerate(corpus):
        for lab in e.labels:
            if lab not in LABELS:
                raise SchemaViolation(f"label {lab!r} not in registry")
            y[i, LABELS.index(lab)] = 1.0
    support = y.sum(axis=0)
    present = support > 0
    if any(0 < s < 2 for s in support):
        bad = [LABELS[i] for i, s in enumerate(support) if 0 < s < 2]
        raise InsufficientLabels(f"labels with fewer than 2 examples: {bad}")

    x = np.stack([_features(tokenize(vocab, e.function)) for e in corpus])
    rng = np.random.default_rng(hyper["seed"])
    w = rng.normal(0.0, 0.01, size=(x.shape[1], len(LABELS))).astype(np.float64)
    b = np.zeros(len(LABELS), dtype=np.float64)
    x64 = x.astype(np.float64)
    y64 = y.astype(np.float64)
    n = len(corpus)
    # rare fused labels would otherwise sit below the 0.5 decision line
    pos_w = np.ones(len(LABELS))
    pos_w[present] = np.clip((n - support[present]) / support[present], 1.0, 40.0)
    for _ in range(hyper["epochs"]):
        p = _sigmoid(x64 @ w + b)
        g = ((p - y64) * np.where(y64 > 0, pos_w, 1.0)) / n
        w -= hyper["lr"] * (x64.T @ g + hyper["l2"] * w)
        b -= hyper["lr"] * g.sum(axis=0)
    # absent labels stay permanently off
    w[:, ~present] = 0.0
    b[~present] = -10.0

    yp = np.zeros((n, len(PROVENANCES)), dtype=np.float64)
    for i, e in enumerate(corpus):
        yp[i, PROVENANCES.index(e.provenance)] = 1.0
    wp = rng.normal(0.0, 0.01, size=(x.shape[1], len(PROVENANCES))).astype(np.float64)
    bp = np.zeros(len(PROVENANCES), dtype=np.float64)
    for _ in range(hyper["epochs"]):
        z = x64 @ wp + bp
        z -= z.max(axis=1, keepdims=True)
        e_z = np.exp(z)
        p = e_z / e_z.sum(axis=1, keepdims=True)
        g = (p - yp) / n
        wp -= hyper["lr"] * (x64.T @ g + hyper["l2"] * wp)
        bp -= hyper["lr"] * g.sum(axis=0)

    return Classifier(vocab=vocab, labels=LABELS,
                      w_label=w.astype(np.float32), b_label=b.astype(np.float32),
                      w_prov=wp.astype(np.float32), b_prov=bp.astype(np.float32),
                      hyper=hyper)


def classify(clf: Classifier, function: AssemblyFunction) -> OperatorLabelVec:
    x = _features(tokenize(clf.vocab, function))
    conf = _sigmoid(x.astype(np.float64) @ clf.w_label + clf.b_label)
    # threshold 0.5, exact ties resolve to unset
    return OperatorLabelVec(bits=[bool(c > 0.5) for c in conf],
                            confidences=[float(c) for c in conf],
                            label_names=clf.labels)


def predict_provenance(clf: Classifier, bundle: TraceBundle) -> str:
    if not bundle.functions:
        raise SchemaViolation("bundle has no functions")
    feats = np.stack([_features(tokenize(clf.vocab, f)) for f in bundle.functions])
    z = feats.mean(axis=0).astype(np.float64) @ clf.w_prov + clf.b_prov
    return PROVENANCES[int(np.argmax(z))]


# ---- versioned binary model file ----

def save_classifier(clf: Classifier, path: str) -> None:
    header = json.dumps({
        "version": MODEL_VERSION,
        "labels": list(clf.labels),
        "merges": [list(m) for m in clf.vocab.merges],
        "hyper": clf.hyper,
        "shapes": {"w_label": list(clf.w_label.shape), "b_label": list(clf.b_label.shape),
                   "w_prov": list(clf.w_prov.shape), "b_prov": list(clf.b_prov.shape)},
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in (clf.w_label, clf.b_label, clf.w_prov, clf.b_prov):
            fh.write(arr.astype("<f4").tobytes())


def load_classifier(path: str) -> Classifier:
    with open(path, "rb") as fh:
        if fh.read(4) != MODEL_MAGIC:
            raise SchemaViolation("not a classifier model file", path)
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        if header.get("version") != MODEL_VERSION:
            raise SchemaViolation("unsupported model version", path)
        arrays = {}
        for name in ("w_label", "b_label", "w_prov", "b_prov"):
            shape = tuple(header["shapes"][name])
            count = int(np.prod(shape))
            arrays[name] = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
    return Classifier(vocab=BpeVocab([tuple(m) for m in header["merges"]]),
                      labels=tuple(header["labels"]),
                      w_label=arrays["w_label"].copy(), b_label=arrays["b_label"].copy(),
                      w_prov=arrays["w_prov"].copy(), b_prov=arrays["b_prov"].copy(),
                      hyper=header["hyper"])
