"""Fusion, linear-probe heads, Recall@K / AUROC, and the ablation benchmark.

The probe protocol is fixed across settings: embeddings stay frozen, one
one-vs-rest logistic-regression head per task is fit on the train split of a
deterministic patient-level 80/20 split, and metrics are computed on the test
split. Settings differ only in the feature vector: current-visit text alone,
or text fused with the structured-history embedding under element or BPE
encoding.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from . import lm as lm_mod
from . import tokenizer as tok_mod
from .corpus import Corpus
from .errors import ConfigError, DataError, DegenerateInputError
from .textenc import TextFeatConfig, featurize_text

REPORT_FORMAT = "structok-report"
REPORT_VERSION = 1
KIND_CODES = "multi-label-code-assignment"
KIND_BINARY = "binary"


def fuse(struct_emb: np.ndarray | None, text_feat: np.ndarray | None) -> np.ndarray:
    """Concatenate structured embedding and text features, structured side first.

    An absent side is omitted, not zero-padded; both absent is an error.
    """
    if struct_emb is None and text_feat is None:
        raise DataError("fuse requires at least one of structured embedding or text features")
    if struct_emb is None:
        return np.asarray(text_feat, dtype=np.float64)
    if text_feat is None:
        return np.asarray(struct_emb, dtype=np.float64)
    return np.concatenate([
        np.asarray(struct_emb, dtype=np.float64),
        np.asarray(text_feat, dtype=np.float64),
    ])


@dataclass(frozen=True)
class HeadConfig:
    l2: float = 1e-4
    epochs: int = 300
    lr: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.l2 < 0 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("invalid head configuration")


@dataclass
class LogRegHead:
    weights: np.ndarray  # [n_labels, dim]
    bias: np.ndarray  # [n_labels]
    label_names: list[str]
    l2: float
    skipped_labels: list[str] = field(default_factory=list)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def fit_head(features: np.ndarray, labels: np.ndarray, cfg: HeadConfig,
             label_names: list[str] | None = None) -> LogRegHead:
    """One-vs-rest logistic regression by deterministic full-batch Adam.

    Labels with no positive or no negative training example are skipped: they
    keep zero weights and a smoothed-prior bias, and are listed on the head.
    The L2 penalty applies to weights, not biases.
    """
    cfg.validate()
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(labels, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or Y.shape[0] != X.shape[0]:
        raise DataError(f"features {X.shape} and labels {Y.shape} do not align")
    n, dim = X.shape
    n_labels = Y.shape[1]
    if label_names is None:
        label_names = [str(i) for i in range(n_labels)]

    pos = Y.sum(axis=0)
    fit_mask = (pos > 0) & (pos < n)
    skipped = [label_names[j] for j in range(n_labels) if not fit_mask[j]]

    W = np.zeros((n_labels, dim))
    # smoothed prior keeps skipped labels ranked by base rate
    prior = (pos + 0.5) / (n + 1.0)
    b = np.log(prior / (1.0 - prior))

    if fit_mask.any():
        cols = np.flatnonzero(fit_mask)
        Yf = Y[:, cols]
        Wf = np.zeros((len(cols), dim))
        bf = b[cols].copy()
        mW = np.zeros_like(Wf)
        vW = np.zeros_like(Wf)
        mb = np.zeros_like(bf)
        vb = np.zeros_like(bf)
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        for step in range(1, cfg.epochs + 1):
            P = _sigmoid(X @ Wf.T + bf)
            R = (P - Yf) / n
            gW = R.T @ X + cfg.l2 * Wf
            gb = R.sum(axis=0)
            mW = beta1 * mW + (1 - beta1) * gW
            vW = beta2 * vW + (1 - beta2) * gW * gW
            mb = beta1 * mb + (1 - beta1) * gb
            vb = beta2 * vb + (1 - beta2) * gb * gb
            c1, c2 = 1 - beta1 ** step, 1 - beta2 ** step
            Wf -= cfg.lr * (mW / c1) / (np.sqrt(vW / c2) + eps)
            bf -= cfg.lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
        W[cols] = Wf
        b[cols] = bf

    return LogRegHead(weights=W, bias=b, label_names=list(label_names),
                      l2=cfg.l2, skipped_labels=skipped)


def head_loss(head: LogRegHead, features: np.ndarray, labels: np.ndarray) -> float:
    """Mean logistic loss plus the L2 penalty, for convergence checks."""
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(labels, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    Z = X @ head.weights.T + head.bias
    # log(1 + exp(-yz)) with y in {0,1}, stable form
    per = np.logaddexp(0.0, Z) - Y * Z
    return float(per.mean(axis=0).sum() + 0.5 * head.l2 * (head.weights ** 2).sum())


def predict_scores(head: LogRegHead, features: np.ndarray) -> np.ndarray:
    """Per-label probabilities, sigmoid of the affine score."""
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.shape[1] != head.weights.shape[1]:
        raise DataError(
            f"feature dim {X.shape[1]} does not match head dim {head.weights.shape[1]}"
        )
    P = _sigmoid(X @ head.weights.T + head.bias)
    return P[0] if single else P


def recall_at_k(scores: np.ndarray, truths: list[set[int]], k: int) -> float:
    """Mean over examples of |top-k labels ∩ truth| / |truth|.

    Ties at the k-th score break by ascending label id. Examples with empty
    truth are excluded; if every example is empty the metric is undefined.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    S = np.asarray(scores, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != len(truths):
        raise DataError("scores and truths do not align")
    n_labels = S.shape[1]
    label_ids = np.arange(n_labels)
    total, used = 0.0, 0
    for row, truth in zip(S, truths):
        if not truth:
            continue
        order = np.lexsort((label_ids, -row))  # score desc, then label id asc
        top = set(order[:k].tolist())
        total += len(top & truth) / len(truth)
        used += 1
    if used == 0:
        raise DegenerateInputError("recall@k undefined: every example has empty truth")
    return total / used


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with average ranks over ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise DataError("scores and labels must be equal-length vectors")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise DataError("labels must be binary 0/1")
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError(
            f"AUROC undefined on single-class input ({n_pos} positives, {n_neg} negatives)"
        )
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Benchmark harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    label_field: str
    k: tuple[int, ...] = (5, 7)

    def validate(self) -> None:
        if self.kind not in (KIND_CODES, KIND_BINARY):
            raise ConfigError(f"unknown task kind '{self.kind}'")
        if self.kind == KIND_CODES and (not self.k or min(self.k) < 1):
            raise ConfigError("code-assignment tasks need K values >= 1")


def load_tasks(path) -> list[TaskSpec]:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    tasks = []
    for entry in raw:
        spec = TaskSpec(
            name=entry["name"],
            kind=entry["kind"],
            label_field=entry["label_field"],
            k=tuple(entry.get("k", (5, 7))),
        )
        spec.validate()
        tasks.append(spec)
    return tasks


def split_patients(patient_ids: list[str], seed: int, train_frac: float = 0.8) -> dict[str, bool]:
    """Deterministic patient-level split: pid -> True if train."""
    out = {}
    for pid in patient_ids:
        h = hashlib.sha256(f"{seed}:{pid}".encode("utf-8")).digest()
        frac = int.from_bytes(h[:8], "big") / 2 ** 64
        out[pid] = frac < train_frac
    return out


def _model_hash(cfg: lm_mod.ModelConfig, params: lm_mod.Params) -> str:
    h = hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode("utf-8"))
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return h.hexdigest()


def run_benchmark(
    corpus: Corpus,
    tok: tok_mod.Tokenizer,
    lm_cfg: lm_mod.ModelConfig | None,
    lm_params: lm_mod.Params | None,
    tasks: list[TaskSpec],
    settings: tuple[str, ...] = ("text", "element", "bpe"),
    seed: int = 0,
    head_cfg: HeadConfig = HeadConfig(),
    element_tok: tok_mod.Tokenizer | None = None,
    text_cfg: TextFeatConfig = TextFeatConfig(),
    train_frac: float = 0.8,
) -> dict:
    """Run the ablation benchmark and return the EvalReport as a plain dict.

    Per patient, the final visit is the current encounter: its codes are the
    code-assignment target and only its text is visible, while the structured
    embedding encodes the preceding history visits. Patients without at least
    one history visit and one final visit are skipped and counted.
    """
    for t in tasks:
        t.validate()
    for s in settings:
        if s not in ("text", "element", "bpe"):
            raise ConfigError(f"unknown setting '{s}'")
    needs_lm = any(s in ("element", "bpe") for s in settings)
    if needs_lm and (lm_cfg is None or lm_params is None):
        raise ConfigError("element/bpe settings require a model checkpoint")
    if needs_lm and tok.vocab_size != lm_cfg.vocab_size:
        raise DataError(
            f"tokenizer vocabulary ({tok.vocab_size}) does not match "
            f"model vocabulary ({lm_cfg.vocab_size})"
        )

    eligible = []
    skipped_patients = 0
    for t in corpus.patients:
        if len(t.visits) >= 2 and any(v.codes for v in t.visits[:-1]):
            eligible.append(t)
        else:
            skipped_patients += 1
    if not eligible:
        raise DataError("no patient has both a history and a current visit")

    histories = [replace(t, visits=t.visits[:-1]) for t in eligible]
    text_feats = np.stack([featurize_text(t.current_text or "", text_cfg) for t in eligible])

    emb: dict[str, np.ndarray] = {}
    if "element" in settings:
        el_tok = element_tok if element_tok is not None else tok
        seqs = [tok_mod.encode(el_tok, h, mode="element") for h in histories]
        emb["element"] = lm_mod.embed_batch(lm_params, lm_cfg, seqs)
    if "bpe" in settings:
        seqs = [tok_mod.encode(tok, h, mode="bpe") for h in histories]
        emb["bpe"] = lm_mod.embed_batch(lm_params, lm_cfg, seqs)

    is_train = split_patients([t.patient_id for t in eligible], seed, train_frac)
    train_idx = np.array([i for i, t in enumerate(eligible) if is_train[t.patient_id]])
    test_idx = np.array([i for i, t in enumerate(eligible) if not is_train[t.patient_id]])
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise DataError("degenerate train/test split; adjust train_frac or corpus size")

    def features_for(setting: str) -> np.ndarray:
        if setting == "text":
            return np.stack([fuse(None, tf) for tf in text_feats])
        return np.stack([fuse(e, tf) for e, tf in zip(emb[setting], text_feats)])

    base_codes = list(tok.vocab.base_codes)
    code_pos = {c: i for i, c in enumerate(base_codes)}

    results: dict = {}
    for setting in settings:
        X = features_for(setting)
        per_task: dict = {}
        for task in tasks:
            try:
                per_task[task.name] = _run_task(
                    task, eligible, X, train_idx, test_idx, head_cfg, base_codes, code_pos
                )
            except DataError as e:
                per_task[task.name] = {"error": str(e)}
        results[setting] = per_task

    hashes = {
        "tokenizer": hashlib.sha256(tok_mod.serialize(tok).encode("utf-8")).hexdigest(),
        "head": hashlib.sha256(
            json.dumps(asdict(head_cfg), sort_keys=True).encode("utf-8")
        ).hexdigest(),
    }
    if element_tok is not None and "element" in settings:
        hashes["element_tokenizer"] = hashlib.sha256(
            tok_mod.serialize(element_tok).encode("utf-8")
        ).hexdigest()
    if needs_lm:
        hashes["model"] = _model_hash(lm_cfg, lm_params)

    return {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "seed": seed,
        "settings": list(settings),
        "split": {
            "train": int(len(train_idx)),
            "test": int(len(test_idx)),
            "train_frac": train_frac,
        },
        "skipped_patients": skipped_patients,
        "config_hashes": hashes,
        "results": results,
    }


def _run_task(task, eligible, X, train_idx, test_idx, head_cfg, base_codes, code_pos):
    have = [t.labels is not None and task.label_field in t.labels for t in eligible]
    if not all(have):
        missing = have.count(False)
        raise DataError(f"label field '{task.label_field}' missing for {missing} patient(s)")

    if task.kind == KIND_BINARY:
        y = np.array([int(t.labels[task.label_field]) for t in eligible], dtype=np.float64)
        head = fit_head(X[train_idx], y[train_idx][:, None], head_cfg, [task.label_field])
        scores = predict_scores(head, X[test_idx])[:, 0]
        value = auroc(scores, y[test_idx].astype(int))
        return {
            "kind": task.kind,
            "metrics": {"auroc": value},
            "n_train": int(len(train_idx)),
            "n_test": int(len(test_idx)),
            "skipped_labels": len(head.skipped_labels),
        }

    # multi-label code assignment over the tokenizer's base vocabulary
    excluded_codes = 0
    Y = np.zeros((len(eligible), len(base_codes)), dtype=np.float64)
    truth_all: list[set[int]] = []
    for i, t in enumerate(eligible):
        truth = set()
        for code in t.labels[task.label_field]:
            j = code_pos.get(code)
            if j is None:
                excluded_codes += 1
            else:
                truth.add(j)
                Y[i, j] = 1.0
        truth_all.append(truth)

    head = fit_head(X[train_idx], Y[train_idx], head_cfg, base_codes)
    scores = predict_scores(head, X[test_idx])
    truths = [truth_all[i] for i in test_idx]
    empty = sum(1 for s in truths if not s)
    metrics = {f"recall@{k}": recall_at_k(scores, truths, k) for k in task.k}
    return {
        "kind": task.kind,
        "metrics": metrics,
        "n_train": int(len(train_idx)),
        "n_test": int(len(test_idx)),
        "skipped_labels": len(head.skipped_labels),
        "excluded_label_codes": excluded_codes,
        "empty_truth_excluded": empty,
    }


def report_to_json(report: dict) -> str:
    """Canonical report serialization: stable key order, compact separators."""
    return json.dumps(report, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def format_report_table(report: dict) -> str:
    """Render an EvalReport as a settings-by-metrics text table."""
    settings = report["settings"]
    columns: list[tuple[str, str]] = []
    for setting in settings:
        for task_name, entry in report["results"][setting].items():
            for metric in entry.get("metrics", {}):
                if (task_name, metric) not in columns:
                    columns.append((task_name, metric))
    headers = ["setting"] + [f"{t}:{m}" for t, m in columns]
    rows = []
    for setting in settings:
        row = [setting]
        for task_name, metric in columns:
            entry = report["results"][setting].get(task_name, {})
            if "error" in entry:
                row.append("error")
            else:
                value = entry.get("metrics", {}).get(metric)
                row.append("-" if value is None else f"{value:.4f}")
        rows.append(row)
    widths = [max(len(headers[i]), *(len(r[i]) for r in rows)) for i in range(len(headers))]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * widths[i] for i in range(len(headers))),
    ]
    lines += ["  ".join(c.ljust(widths[i]) for i, c in enumerate(row)) for row in rows]
    return "\n".join(lines)
