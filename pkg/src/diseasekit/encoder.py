"""Small transformer encoder with an MLM head and hand-derived gradients.

Parameters live in a flat name->array dict (float32 storage by default);
all forward/backward arithmetic runs in float64 so finite-difference
gradient checks are meaningful.  The MLM head is an untied linear map
(logit = w . hidden + b) unless ``tie_mlm_head`` is set, in which case the
token embedding matrix doubles as the output projection.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptCheckpointError, ValidationError

CHECKPOINT_MAGIC = b"DKI1"
FORMAT_MAJOR = 1
FORMAT_MINOR = 1

Params = dict[str, np.ndarray]

NEG_INF = -1e9  # additive attention bias for padded keys


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 0  # 0 means 4 * model_dim
    max_seq_len: int = 256
    layernorm_epsilon: float = 1e-12
    seed: int = 0
    tie_mlm_head: bool = False

    def __post_init__(self):
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.model_dim)
        if self.model_dim % self.heads != 0:
            raise ValidationError("model_dim must be divisible by heads")
        for name in ("vocab_size", "layers", "heads", "model_dim", "ffn_dim",
                     "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "EncoderConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known})


def _tensor_specs(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init kind) for every learnable tensor."""
    d, f = cfg.model_dim, cfg.ffn_dim
    specs: list[tuple[str, tuple[int, ...], str]] = [
        ("tok_emb", (cfg.vocab_size, d), "normal"),
        ("pos_emb", (cfg.max_seq_len, d), "normal"),
    ]
    for i in range(cfg.layers):
        p = f"layer{i}."
        specs += [
            (p + "attn.wq", (d, d), "normal"),
            (p + "attn.bq", (d,), "zeros"),
            (p + "attn.wk", (d, d), "normal"),
            (p + "attn.bk", (d,), "zeros"),
            (p + "attn.wv", (d, d), "normal"),
            (p + "attn.bv", (d,), "zeros"),
            (p + "attn.wo", (d, d), "normal"),
            (p + "attn.bo", (d,), "zeros"),
            (p + "ln1.gain", (d,), "ones"),
            (p + "ln1.bias", (d,), "zeros"),
            (p + "ffn.w1", (d, f), "normal"),
            (p + "ffn.b1", (f,), "zeros"),
            (p + "ffn.w2", (f, d), "normal"),
            (p + "ffn.b2", (d,), "zeros"),
            (p + "ln2.gain", (d,), "ones"),
            (p + "ln2.bias", (d,), "zeros"),
        ]
    if not cfg.tie_mlm_head:
        specs.append(("mlm.w", (cfg.vocab_size, d), "normal"))
    specs.append(("mlm.b", (cfg.vocab_size,), "zeros"))
    return specs


def init_params(cfg: EncoderConfig, dtype=np.float32) -> Params:
    """Seeded init: weights ~ N(0, 0.02^2), biases 0, layer-norm gains 1."""
    rng = np.random.default_rng(cfg.seed)
    params: Params = {}
    for name, shape, kind in _tensor_specs(cfg):
        if kind == "normal":
            tensor = rng.normal(0.0, 0.02, size=shape)
        elif kind == "ones":
            tensor = np.ones(shape)
        else:
            tensor = np.zeros(shape)
        params[name] = tensor.astype(dtype)
    return params


@dataclass
class EncoderModel:
    cfg: EncoderConfig
    params: Params

    @classmethod
    def init(cls, cfg: EncoderConfig, dtype=np.float32) -> "EncoderModel":
        return cls(cfg=cfg, params=init_params(cfg, dtype=dtype))


@dataclass
class ForwardTrace:
    """Activations cached by forward, consumed by backward."""

    ids: np.ndarray  # (B, T) int
    attention_mask: np.ndarray  # (B, T) bool
    embedded: np.ndarray  # (B, T, d)
    layer_caches: list[dict]
    hidden_states: np.ndarray  # (B, T, d) final
    logit_values: np.ndarray  # (B, T, V)
    squeeze: bool

    @property
    def hidden(self) -> np.ndarray:
        return self.hidden_states[0] if self.squeeze else self.hidden_states

    @property
    def logits(self) -> np.ndarray:
        return self.logit_values[0] if self.squeeze else self.logit_values


def gelu(x: np.ndarray) -> np.ndarray:
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    c = np.sqrt(2.0 / np.pi)
    u = c * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * c * (1.0 + 3 * 0.044715 * x**2)


def _layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    return gain * xhat + bias, {"xhat": xhat, "inv": inv}


def _layernorm_backward(dy: np.ndarray, gain: np.ndarray, cache: dict):
    xhat, inv = cache["xhat"], cache["inv"]
    dgain = (dy * xhat).sum(axis=(0, 1))
    dbias = dy.sum(axis=(0, 1))
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValidationError("softmax input must be finite")
    return _softmax_last(logits)


def _as_batch(ids, attention_mask, cfg: EncoderConfig):
    arr = np.asarray(ids)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValidationError("ids must be a 1-D or 2-D integer array")
    if arr.shape[1] > cfg.max_seq_len:
        raise ValidationError(
            f"sequence length {arr.shape[1]} exceeds max_seq_len {cfg.max_seq_len}"
        )
    if arr.size and (arr.min() < 0 or arr.max() >= cfg.vocab_size):
        raise ValidationError("token id out of vocabulary range")
    if attention_mask is None:
        mask = np.ones(arr.shape, dtype=bool)
    else:
        mask = np.asarray(attention_mask, dtype=bool)
        if squeeze and mask.ndim == 1:
            mask = mask[None, :]
        if mask.shape != arr.shape:
            raise ValidationError("attention_mask shape must match ids")
    return arr.astype(np.int64), mask, squeeze


def _mlm_weight(params: Params, cfg: EncoderConfig) -> np.ndarray:
    return params["tok_emb"] if cfg.tie_mlm_head else params["mlm.w"]


def forward(
    params: Params,
    cfg: EncoderConfig,
    ids,
    attention_mask=None,
) -> ForwardTrace:
    """Embed, run the layer stack, and project to per-position vocab logits.

    Padded key positions (attention_mask False) receive a large negative
    additive attention score, so they never influence unpadded positions.
    """
    ids_b, mask, squeeze = _as_batch(ids, attention_mask, cfg)
    B, T = ids_b.shape
    d, H, dh = cfg.model_dim, cfg.heads, cfg.head_dim
    w = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    x = w["tok_emb"][ids_b] + w["pos_emb"][:T][None, :, :]
    embedded = x
    key_bias = np.where(mask, 0.0, NEG_INF)[:, None, None, :]  # (B,1,1,T)

    caches: list[dict] = []
    for i in range(cfg.layers):
        p = f"layer{i}."
        q = x @ w[p + "attn.wq"] + w[p + "attn.bq"]
        k = x @ w[p + "attn.wk"] + w[p + "attn.bk"]
        v = x @ w[p + "attn.wv"] + w[p + "attn.bv"]
        qh = q.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh) + key_bias
        attn = _softmax_last(scores)
        ctx = (attn @ vh).transpose(0, 2, 1, 3).reshape(B, T, d)
        attn_out = ctx @ w[p + "attn.wo"] + w[p + "attn.bo"]
        u1 = x + attn_out
        h, ln1_cache = _layernorm(
            u1, w[p + "ln1.gain"], w[p + "ln1.bias"], cfg.layernorm_epsilon
        )
        a1 = h @ w[p + "ffn.w1"] + w[p + "ffn.b1"]
        g = gelu(a1)
        ffn_out = g @ w[p + "ffn.w2"] + w[p + "ffn.b2"]
        u2 = h + ffn_out
        out, ln2_cache = _layernorm(
            u2, w[p + "ln2.gain"], w[p + "ln2.bias"], cfg.layernorm_epsilon
        )
        caches.append(
            {
                "x": x,
                "qh": qh,
                "kh": kh,
                "vh": vh,
                "attn": attn,
                "ctx": ctx,
                "ln1": ln1_cache,
                "h": h,
                "a1": a1,
                "g": g,
                "ln2": ln2_cache,
            }
        )
        x = out

    logits = x @ _mlm_weight(w, cfg).T + w["mlm.b"]
    return ForwardTrace(
        ids=ids_b,
        attention_mask=mask,
        embedded=embedded,
        layer_caches=caches,
        hidden_states=x,
        logit_values=logits,
        squeeze=squeeze,
    )


def _zero_grads(params: Params) -> Params:
    return {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}


def backward_from_hidden(
    trace: ForwardTrace,
    params: Params,
    cfg: EncoderConfig,
    dhidden: np.ndarray,
    grads: Params | None = None,
) -> Params:
    """Backpropagate a gradient at the final hidden states to all encoder
    tensors (everything except the MLM head)."""
    B, T = trace.ids.shape
    d, H, dh = cfg.model_dim, cfg.heads, cfg.head_dim
    w = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    grads = grads if grads is not None else _zero_grads(params)

    dx = np.asarray(dhidden, dtype=np.float64)
    if dx.ndim == 2:
        dx = dx[None, :, :]
    if dx.shape != trace.hidden_states.shape:
        raise ValidationError("dhidden shape must match hidden states")

    for i in reversed(range(cfg.layers)):
        p = f"layer{i}."
        c = trace.layer_caches[i]
        du2, dgain2, dbias2 = _layernorm_backward(dx, w[p + "ln2.gain"], c["ln2"])
        grads[p + "ln2.gain"] += dgain2
        grads[p + "ln2.bias"] += dbias2

        dffn_out = du2
        grads[p + "ffn.w2"] += np.einsum("btf,btd->fd", c["g"], dffn_out)
        grads[p + "ffn.b2"] += dffn_out.sum(axis=(0, 1))
        dg = dffn_out @ w[p + "ffn.w2"].T
        da1 = dg * gelu_grad(c["a1"])
        grads[p + "ffn.w1"] += np.einsum("btd,btf->df", c["h"], da1)
        grads[p + "ffn.b1"] += da1.sum(axis=(0, 1))
        dh_total = du2 + da1 @ w[p + "ffn.w1"].T

        du1, dgain1, dbias1 = _layernorm_backward(
            dh_total, w[p + "ln1.gain"], c["ln1"]
        )
        grads[p + "ln1.gain"] += dgain1
        grads[p + "ln1.bias"] += dbias1

        dattn_out = du1
        grads[p + "attn.wo"] += np.einsum("btd,bte->de", c["ctx"], dattn_out)
        grads[p + "attn.bo"] += dattn_out.sum(axis=(0, 1))
        dctx = (dattn_out @ w[p + "attn.wo"].T).reshape(B, T, H, dh)
        dctx = dctx.transpose(0, 2, 1, 3)  # (B,H,T,dh)

        dattn = dctx @ c["vh"].transpose(0, 1, 3, 2)
        dvh = c["attn"].transpose(0, 1, 3, 2) @ dctx
        a = c["attn"]
        dscores = a * (dattn - (dattn * a).sum(axis=-1, keepdims=True))
        dscores /= np.sqrt(dh)
        dqh = dscores @ c["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"]

        dq = dqh.transpose(0, 2, 1, 3).reshape(B, T, d)
        dk = dkh.transpose(0, 2, 1, 3).reshape(B, T, d)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B, T, d)
        x_in = c["x"]
        grads[p + "attn.wq"] += np.einsum("btd,bte->de", x_in, dq)
        grads[p + "attn.bq"] += dq.sum(axis=(0, 1))
        grads[p + "attn.wk"] += np.einsum("btd,bte->de", x_in, dk)
        grads[p + "attn.bk"] += dk.sum(axis=(0, 1))
        grads[p + "attn.wv"] += np.einsum("btd,bte->de", x_in, dv)
        grads[p + "attn.bv"] += dv.sum(axis=(0, 1))

        dx = (
            du1
            + dq @ w[p + "attn.wq"].T
            + dk @ w[p + "attn.wk"].T
            + dv @ w[p + "attn.wv"].T
        )

    np.add.at(grads["tok_emb"], trace.ids, dx)
    grads["pos_emb"][:T] += dx.sum(axis=0)
    return grads


def backward(
    trace: ForwardTrace,
    params: Params,
    cfg: EncoderConfig,
    dlogits: np.ndarray,
) -> Params:
    """Analytic gradients for every parameter given a loss gradient at the
    per-position vocabulary logits."""
    dl = np.asarray(dlogits, dtype=np.float64)
    if dl.ndim == 2:
        dl = dl[None, :, :]
    if dl.shape != trace.logit_values.shape:
        raise ValidationError(
            f"dlogits shape {dl.shape} must match logits "
            f"{trace.logit_values.shape}"
        )
    grads = _zero_grads(params)
    hidden = trace.hidden_states
    head_w = _mlm_weight(
        {k: np.asarray(v, np.float64) for k, v in params.items()}, cfg
    )
    head_grad = np.einsum("btv,btd->vd", dl, hidden)
    if cfg.tie_mlm_head:
        grads["tok_emb"] += head_grad
    else:
        grads["mlm.w"] += head_grad
    grads["mlm.b"] += dl.sum(axis=(0, 1))
    dhidden = dl @ head_w
    return backward_from_hidden(trace, params, cfg, dhidden, grads=grads)


def save_checkpoint(model: EncoderModel, path) -> None:
    """Write magic, length-prefixed JSON header, then float32 LE tensors."""
    manifest = []
    blobs = []
    offset = 0
    for name in model.params:
        tensor = np.ascontiguousarray(model.params[name], dtype="<f4")
        manifest.append(
            {"name": name, "shape": list(tensor.shape), "offset": offset}
        )
        blobs.append(tensor.tobytes())
        offset += len(blobs[-1])
    header = json.dumps(
        {
            "format": {"major": FORMAT_MAJOR, "minor": FORMAT_MINOR},
            "config": model.cfg.to_dict(),
            "manifest": manifest,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> EncoderModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"bad checkpoint magic in {path}")
    if len(data) < 8:
        raise CorruptCheckpointError("checkpoint truncated before header")
    (header_len,) = struct.unpack("<I", data[4:8])
    header_end = 8 + header_len
    if len(data) < header_end:
        raise CorruptCheckpointError("checkpoint truncated inside header")
    try:
        header = json.loads(data[8:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable checkpoint header: {exc}")
    version = header.get("format", {})
    if version.get("major") != FORMAT_MAJOR:
        raise CorruptCheckpointError(
            f"unsupported checkpoint major version {version.get('major')}"
        )
    if version.get("minor", 0) > FORMAT_MINOR:
        raise CorruptCheckpointError(
            f"checkpoint minor version {version.get('minor')} is newer than "
            f"this reader ({FORMAT_MINOR})"
        )
    cfg = EncoderConfig.from_dict(header["config"])
    blob = data[header_end:]
    params: Params = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise CorruptCheckpointError(
                f"checkpoint truncated in tensor {entry['name']!r}"
            )
        params[entry["name"]] = np.frombuffer(
            blob[start:end], dtype="<f4"
        ).reshape(shape).copy()
    return EncoderModel(cfg=cfg, params=params)
