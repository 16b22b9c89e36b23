"""Decoder-only causal transformer over token sequences, in plain numpy.

GPT-2 family layout at toy scale: learned absolute positions, pre-norm
residual blocks, exact GELU, tied input/output embeddings. Forward and
reverse passes are hand-written so gradients can be verified against finite
differences; everything is deterministic given seeds. Training runs in
float32; gradient-check mode uses float64 parameters end to end.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erf

from .errors import CheckpointError, ConfigError, DataError
from .tokenizer import BOS, EOS, PAD, VSEP, check_layout

CHECKPOINT_MAGIC = b"USLM1\n"
_LN_EPS = 1e-5
_ADAM_EPS = 1e-8
_SQRT_2PI = float(np.sqrt(2.0 * np.pi))


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_length: int = 256
    model_dim: int = 64
    n_heads: int = 4
    n_layers: int = 2
    mlp_ratio: int = 4
    dropout: float = 0.0

    def validate(self) -> None:
        if min(self.vocab_size, self.context_length, self.model_dim, self.n_heads,
               self.n_layers, self.mlp_ratio) < 1:
            raise ConfigError("all model dimensions must be positive")
        if self.model_dim % self.n_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.dropout != 0.0:
            raise ConfigError("only dropout=0 is supported (deterministic reference)")


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 32
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    warmup_steps: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size < 1 or self.warmup_steps < 0:
            raise ConfigError("steps/batch_size/warmup_steps out of range")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")


@dataclass
class TrainReport:
    losses: list[float]
    final_loss: float
    tokens_per_second: float
    model_config: dict
    train_config: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, separators=(",", ":"))


Params = dict[str, np.ndarray]


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> Params:
    """Normal(0, 0.02) weights, residual output projections scaled by
    1/sqrt(2*n_layers), zero biases, unit layer-norm gains. Deterministic."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    d, r = cfg.model_dim, cfg.mlp_ratio
    std, res_std = 0.02, 0.02 / np.sqrt(2.0 * cfg.n_layers)

    def normal(shape, s):
        return rng.normal(0.0, s, size=shape).astype(dtype)

    p: Params = {}
    p["tok_emb"] = normal((cfg.vocab_size, d), std)
    p["pos_emb"] = normal((cfg.context_length, d), std)
    for i in range(cfg.n_layers):
        p[f"l{i}.ln1.g"] = np.ones(d, dtype=dtype)
        p[f"l{i}.ln1.b"] = np.zeros(d, dtype=dtype)
        p[f"l{i}.attn.wqkv"] = normal((d, 3 * d), std)
        p[f"l{i}.attn.bqkv"] = np.zeros(3 * d, dtype=dtype)
        p[f"l{i}.attn.wo"] = normal((d, d), res_std)
        p[f"l{i}.attn.bo"] = np.zeros(d, dtype=dtype)
        p[f"l{i}.ln2.g"] = np.ones(d, dtype=dtype)
        p[f"l{i}.ln2.b"] = np.zeros(d, dtype=dtype)
        p[f"l{i}.mlp.w1"] = normal((d, r * d), std)
        p[f"l{i}.mlp.b1"] = np.zeros(r * d, dtype=dtype)
        p[f"l{i}.mlp.w2"] = normal((r * d, d), res_std)
        p[f"l{i}.mlp.b2"] = np.zeros(d, dtype=dtype)
    p["lnf.g"] = np.ones(d, dtype=dtype)
    p["lnf.b"] = np.zeros(d, dtype=dtype)
    return p


def n_params(p: Params) -> int:
    return sum(int(t.size) for t in p.values())


# GPT-2 tanh-form GELU
_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def _gelu(x):
    c, a = x.dtype.type(_GELU_C), x.dtype.type(_GELU_A)
    return 0.5 * x * (1.0 + np.tanh(c * (x + a * x * x * x)))


def _gelu_grad(x):
    c, a = x.dtype.type(_GELU_C), x.dtype.type(_GELU_A)
    t = np.tanh(c * (x + a * x * x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * a * x * x)


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(_LN_EPS))
    xhat = (x - mu) * inv
    return xhat * g + b, xhat, inv


def _layer_norm_grad(dy, xhat, inv, g):
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _check_batch(cfg: ModelConfig, ids: np.ndarray) -> None:
    if ids.ndim != 2:
        raise DataError(f"batch must be 2-D [batch, time], got shape {ids.shape}")
    if ids.shape[1] > cfg.context_length:
        raise DataError(
            f"sequence length {ids.shape[1]} exceeds context length {cfg.context_length}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise DataError("token id out of range for the model vocabulary")


def _forward(p: Params, cfg: ModelConfig, ids: np.ndarray, pad_mask: np.ndarray | None,
             want_cache: bool):
    _check_batch(cfg, ids)
    B, T = ids.shape
    if pad_mask is None:
        pad_mask = ids != PAD
    dtype = p["tok_emb"].dtype
    nh = cfg.n_heads
    hd = cfg.model_dim // nh
    scale = dtype.type(1.0 / np.sqrt(hd))

    x = p["tok_emb"][ids] + p["pos_emb"][:T]
    # key j visible to query i iff j <= i and j is not padding
    allowed = np.tril(np.ones((T, T), dtype=bool))[None, None, :, :] & pad_mask[:, None, None, :]

    cache: list[dict] = []
    for i in range(cfg.n_layers):
        a_in, xhat1, inv1 = _layer_norm(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])
        qkv = a_in @ p[f"l{i}.attn.wqkv"] + p[f"l{i}.attn.bqkv"]
        q, k, v = (
            qkv[..., j * cfg.model_dim:(j + 1) * cfg.model_dim]
            .reshape(B, T, nh, hd).transpose(0, 2, 1, 3)
            for j in range(3)
        )
        scores = np.where(allowed, (q @ k.transpose(0, 1, 3, 2)) * scale, dtype.type(-np.inf))
        probs = np.exp(scores - scores.max(axis=-1, keepdims=True))
        probs /= probs.sum(axis=-1, keepdims=True)
        o_heads = probs @ v
        o = o_heads.transpose(0, 2, 1, 3).reshape(B, T, cfg.model_dim)
        attn_out = o @ p[f"l{i}.attn.wo"] + p[f"l{i}.attn.bo"]
        x_mid = x + attn_out

        m_in, xhat2, inv2 = _layer_norm(x_mid, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
        h1 = m_in @ p[f"l{i}.mlp.w1"] + p[f"l{i}.mlp.b1"]
        gact = _gelu(h1)
        x = x_mid + gact @ p[f"l{i}.mlp.w2"] + p[f"l{i}.mlp.b2"]

        if want_cache:
            cache.append(dict(a_in=a_in, xhat1=xhat1, inv1=inv1, q=q, k=k, v=v,
                              probs=probs, o=o, m_in=m_in, xhat2=xhat2, inv2=inv2,
                              h1=h1, gact=gact))

    xf, xhatf, invf = _layer_norm(x, p["lnf.g"], p["lnf.b"])
    logits = xf @ p["tok_emb"].T
    if not want_cache:
        return logits, pad_mask, None
    return logits, pad_mask, dict(layers=cache, xf=xf, xhatf=xhatf, invf=invf, ids=ids)


def forward(p: Params, cfg: ModelConfig, ids: np.ndarray,
            pad_mask: np.ndarray | None = None) -> np.ndarray:
    """Logits [batch, time, vocab]; PAD positions are masked out of attention."""
    logits, _, _ = _forward(p, cfg, ids, pad_mask, want_cache=False)
    return logits


def hidden_states(p: Params, cfg: ModelConfig, ids: np.ndarray,
                  pad_mask: np.ndarray | None = None) -> np.ndarray:
    """Final-layer hidden states after the last layer norm, [batch, time, dim]."""
    _, _, cache = _forward(p, cfg, ids, pad_mask, want_cache=True)
    return cache["xf"]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def nll_loss(logits: np.ndarray, targets: np.ndarray,
             target_mask: np.ndarray | None = None) -> float:
    """Mean next-token negative log-likelihood over non-pad target positions."""
    if target_mask is None:
        target_mask = targets != PAD
    n_valid = int(target_mask.sum())
    if n_valid == 0:
        raise DataError("loss undefined: no non-pad target positions")
    ls = _log_softmax(logits)
    picked = np.take_along_axis(ls, targets[..., None], axis=-1)[..., 0]
    return float(-(picked * target_mask).sum() / n_valid)


def loss_and_grads(p: Params, cfg: ModelConfig, inputs: np.ndarray, targets: np.ndarray,
                   target_mask: np.ndarray | None = None,
                   pad_mask: np.ndarray | None = None) -> tuple[float, Params]:
    """NLL loss and its gradient for every parameter tensor. Deterministic."""
    if target_mask is None:
        target_mask = targets != PAD
    n_valid = int(target_mask.sum())
    if n_valid == 0:
        raise DataError("loss undefined: no non-pad target positions")

    logits, pad_mask, cache = _forward(p, cfg, inputs, pad_mask, want_cache=True)
    B, T = inputs.shape
    d = cfg.model_dim
    nh = cfg.n_heads
    hd = d // nh
    dtype = p["tok_emb"].dtype
    scale = dtype.type(1.0 / np.sqrt(hd))

    # softmax and target log-probs in one pass over the vocab axis
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=-1, keepdims=True)
    shifted_t = np.take_along_axis(logits - m, targets[..., None], axis=-1)[..., 0]
    picked = shifted_t - np.log(z[..., 0])
    loss = float(-(picked * target_mask).sum() / n_valid)

    w = (target_mask / n_valid).astype(dtype)
    dlogits = (e / z) * w[..., None]
    np.subtract.at(dlogits, (np.arange(B)[:, None], np.arange(T)[None, :], targets), w)

    g: Params = {name: np.zeros_like(t) for name, t in p.items()}
    xf = cache["xf"]
    g["tok_emb"] += dlogits.reshape(-1, cfg.vocab_size).T @ xf.reshape(-1, d)
    dxf = dlogits @ p["tok_emb"]
    dx, g["lnf.g"][...], g["lnf.b"][...] = _layer_norm_grad(
        dxf, cache["xhatf"], cache["invf"], p["lnf.g"]
    )

    for i in reversed(range(cfg.n_layers)):
        c = cache["layers"][i]
        # MLP block: x = x_mid + gelu(LN2(x_mid) @ w1 + b1) @ w2 + b2
        dh2 = dx
        g[f"l{i}.mlp.w2"][...] = c["gact"].reshape(-1, c["gact"].shape[-1]).T @ dh2.reshape(-1, d)
        g[f"l{i}.mlp.b2"][...] = dh2.sum(axis=(0, 1))
        dg_act = dh2 @ p[f"l{i}.mlp.w2"].T
        dh1 = dg_act * _gelu_grad(c["h1"])
        g[f"l{i}.mlp.w1"][...] = c["m_in"].reshape(-1, d).T @ dh1.reshape(-1, dh1.shape[-1])
        g[f"l{i}.mlp.b1"][...] = dh1.sum(axis=(0, 1))
        dm_in = dh1 @ p[f"l{i}.mlp.w1"].T
        dx_mid, g[f"l{i}.ln2.g"][...], g[f"l{i}.ln2.b"][...] = _layer_norm_grad(
            dm_in, c["xhat2"], c["inv2"], p[f"l{i}.ln2.g"]
        )
        dx_mid += dx

        # attention block: x_mid = x_in + (heads(LN1(x_in)) merged) @ wo + bo
        dattn_out = dx_mid
        g[f"l{i}.attn.wo"][...] = c["o"].reshape(-1, d).T @ dattn_out.reshape(-1, d)
        g[f"l{i}.attn.bo"][...] = dattn_out.sum(axis=(0, 1))
        do = (dattn_out @ p[f"l{i}.attn.wo"].T).reshape(B, T, nh, hd).transpose(0, 2, 1, 3)

        probs, v = c["probs"], c["v"]
        dprobs = do @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ do
        dscores = (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * probs
        dq = (dscores @ c["k"]) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ c["q"]) * scale

        dqkv = np.concatenate(
            [t.transpose(0, 2, 1, 3).reshape(B, T, d) for t in (dq, dk, dv)], axis=-1
        )
        g[f"l{i}.attn.wqkv"][...] = c["a_in"].reshape(-1, d).T @ dqkv.reshape(-1, 3 * d)
        g[f"l{i}.attn.bqkv"][...] = dqkv.sum(axis=(0, 1))
        da_in = dqkv @ p[f"l{i}.attn.wqkv"].T
        dx_in, g[f"l{i}.ln1.g"][...], g[f"l{i}.ln1.b"][...] = _layer_norm_grad(
            da_in, c["xhat1"], c["inv1"], p[f"l{i}.ln1.g"]
        )
        dx = dx_in + dx_mid

    np.add.at(g["tok_emb"], inputs, dx)
    g["pos_emb"][:T] += dx.sum(axis=0)

    for name, t in g.items():
        if not np.all(np.isfinite(t)):
            raise DataError(f"non-finite gradient in tensor '{name}'")
    return loss, g


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def truncate_sequence(ids: list[int], context_length: int) -> list[int]:
    """Fit a [BOS, ..., EOS] sequence into the context by dropping oldest whole
    visits, then oldest tokens if a single visit still exceeds the window."""
    if len(ids) <= context_length:
        return list(ids)
    body = ids[1:-1]
    while True:
        try:
            sep = body.index(VSEP)
        except ValueError:
            break
        candidate = body[sep + 1:]
        if len(candidate) + 2 <= context_length:
            return [BOS] + candidate + [EOS]
        body = candidate
    return [BOS] + body[-(context_length - 2):] + [EOS]


def _pad_batch(seqs: list[list[int]], dtype=np.int64) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=dtype)
    for r, s in enumerate(seqs):
        out[r, :len(s)] = s
    return out


def _adamw_step(p: Params, g: Params, m: Params, v: Params, step: int,
                tcfg: TrainConfig) -> None:
    lr = tcfg.learning_rate
    if tcfg.warmup_steps > 0:
        lr *= min(1.0, step / tcfg.warmup_steps)
    if tcfg.grad_clip > 0:
        total = np.sqrt(sum(float((t.astype(np.float64) ** 2).sum()) for t in g.values()))
        if total > tcfg.grad_clip:
            shrink = tcfg.grad_clip / total
            for t in g.values():
                t *= shrink
    b1c = 1.0 - tcfg.beta1 ** step
    b2c = 1.0 - tcfg.beta2 ** step
    for name, grad in g.items():
        m[name] = tcfg.beta1 * m[name] + (1.0 - tcfg.beta1) * grad
        v[name] = tcfg.beta2 * v[name] + (1.0 - tcfg.beta2) * grad * grad
        update = (m[name] / b1c) / (np.sqrt(v[name] / b2c) + _ADAM_EPS)
        if tcfg.weight_decay > 0 and p[name].ndim >= 2:
            update = update + tcfg.weight_decay * p[name]
        p[name] -= lr * update


def evaluate_loss(p: Params, cfg: ModelConfig, sequences: list[list[int]],
                  batch_size: int = 64) -> float:
    """Mean NLL over all non-pad targets of the given sequences."""
    total, count = 0.0, 0
    for lo in range(0, len(sequences), batch_size):
        chunk = [truncate_sequence(s, cfg.context_length) for s in sequences[lo:lo + batch_size]]
        batch = _pad_batch(chunk)
        inputs, targets = batch[:, :-1], batch[:, 1:]
        tmask = targets != PAD
        logits = forward(p, cfg, inputs, pad_mask=inputs != PAD)
        n = int(tmask.sum())
        total += nll_loss(logits, targets, tmask) * n
        count += n
    if count == 0:
        raise DataError("no target tokens to evaluate")
    return total / count


def train_lm(sequences: list[list[int]], mcfg: ModelConfig, tcfg: TrainConfig,
             params: Params | None = None) -> tuple[Params, TrainReport]:
    """AdamW pre-training with linear warmup and global-norm clipping.

    Sequences longer than the context are truncated (oldest visits first);
    batches are padded with PAD and pad targets excluded from the loss.
    Deterministic given seeds.
    """
    mcfg.validate()
    tcfg.validate()
    if not sequences:
        raise DataError("no training sequences")
    top = max(max(s) for s in sequences)
    if top >= mcfg.vocab_size:
        raise DataError(
            f"token id {top} outside model vocabulary of size {mcfg.vocab_size}; "
            "tokenizer and model disagree"
        )

    prepared = [truncate_sequence(s, mcfg.context_length) for s in sequences]
    if params is None:
        params = init_params(mcfg, seed=tcfg.seed)
    m = {k: np.zeros_like(t) for k, t in params.items()}
    v = {k: np.zeros_like(t) for k, t in params.items()}

    rng = np.random.default_rng(tcfg.seed)
    order = rng.permutation(len(prepared))
    cursor = 0
    losses: list[float] = []
    tokens_seen = 0
    t0 = time.perf_counter()

    for step in range(1, tcfg.steps + 1):
        take: list[list[int]] = []
        while len(take) < tcfg.batch_size:
            if cursor == len(order):
                order = rng.permutation(len(prepared))
                cursor = 0
            take.append(prepared[order[cursor]])
            cursor += 1
        batch = _pad_batch(take)
        inputs, targets = batch[:, :-1], batch[:, 1:]
        tmask = targets != PAD
        loss, grads = loss_and_grads(params, mcfg, inputs, targets, tmask,
                                     pad_mask=inputs != PAD)
        _adamw_step(params, grads, m, v, step, tcfg)
        losses.append(loss)
        tokens_seen += int(tmask.sum())

    elapsed = max(time.perf_counter() - t0, 1e-9)
    report = TrainReport(
        losses=losses,
        final_loss=evaluate_loss(params, mcfg, sequences),
        tokens_per_second=tokens_seen / elapsed,
        model_config=asdict(mcfg),
        train_config=asdict(tcfg),
    )
    return params, report


# ---------------------------------------------------------------------------
# Patient embeddings
# ---------------------------------------------------------------------------

def embed_batch(p: Params, cfg: ModelConfig, sequences: list[list[int]]) -> np.ndarray:
    """Final-layer hidden state at each sequence's last non-pad position."""
    if not sequences:
        raise DataError("no sequences to embed")
    out = np.zeros((len(sequences), cfg.model_dim), dtype=p["tok_emb"].dtype)
    batch_size = 64
    for lo in range(0, len(sequences), batch_size):
        chunk = sequences[lo:lo + batch_size]
        trunc = []
        for s in chunk:
            check_layout(list(s), cfg.vocab_size)
            trunc.append(truncate_sequence(list(s), cfg.context_length))
        batch = _pad_batch(trunc)
        h = hidden_states(p, cfg, batch, pad_mask=batch != PAD)
        for r, s in enumerate(trunc):
            out[lo + r] = h[r, len(s) - 1]
    return out


def embed_timeline(p: Params, cfg: ModelConfig, ids: list[int]) -> np.ndarray:
    """Embedding of one encoded timeline: hidden state at the EOS position."""
    return embed_batch(p, cfg, [ids])[0]


# ---------------------------------------------------------------------------
# Checkpoints: magic line, JSON header with tensor manifest, raw f32 data
# ---------------------------------------------------------------------------

def save_checkpoint(path, cfg: ModelConfig, params: Params) -> None:
    manifest = []
    offset = 0
    for name, t in params.items():
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += int(t.size) * 4
    header = json.dumps(
        {"config": asdict(cfg), "tensors": manifest},
        ensure_ascii=False, separators=(",", ":"),
    )
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(header.encode("utf-8") + b"\n")
        for t in params.values():
            f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, Params]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
            cfg = ModelConfig(**header["config"])
        except (ValueError, KeyError, TypeError) as e:
            raise CheckpointError(f"{path}: malformed checkpoint header: {e}") from None
        data = f.read()

    params: Params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        lo = entry["offset"]
        hi = lo + size * 4
        if hi > len(data):
            raise CheckpointError(f"{path}: tensor '{entry['name']}' overruns the file")
        params[entry["name"]] = np.frombuffer(
            data[lo:hi], dtype="<f4"
        ).reshape(shape).copy()
    expected = set(init_params(cfg, seed=0).keys())
    if set(params.keys()) != expected:
        raise CheckpointError(f"{path}: tensor manifest does not match the configuration")
    return cfg, params
