"""Encoder-decoder transformers with one decoder (base) or two coupled decoders.

Variants
--------
``base``
    A standard pre-norm encoder-decoder.
``dual``
    Two decoders, each block holding an extra decoder-decoder attention
    sublayer whose queries come from its own stream and whose keys/values come
    from the partner stream at the same depth. Each direction has its own
    parameters.
``shared``
    Like ``dual`` but both decoders (including the single decoder-decoder
    attention set) resolve to the same tensors. The streams are told apart by a
    target tag token placed right after BOS.

Decoder-decoder attention is diagonal-causal: query position ``i`` sees partner
positions ``<= i``. Since position ``i`` has consumed the inputs ``BOS, y_1 ..
y_i``, the logits predicting ``y_{i+1}`` depend on the partner prefix
``y^other_{<=i}`` only.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VARIANTS = ("base", "dual", "shared")
CHECKPOINT_FORMAT = "dualsub-checkpoint/1"


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 512
    d_ff: int = 2048
    n_heads: int = 8
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    max_len: int = 256
    variant: str = "base"
    dropout: float = 0.0
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    tag1_id: int = 6
    tag2_id: int = 7

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size <= max(self.pad_id, self.bos_id, self.eos_id):
            raise ValueError("vocab_size must include the special tokens")

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# parameter layout

_ATTN = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def _attn_shapes(d: int) -> dict[str, tuple[int, ...]]:
    return {n: ((d, d) if n.startswith("w") else (d,)) for n in _ATTN}


def _ln_shapes(d: int) -> dict[str, tuple[int, ...]]:
    return {"g": (d,), "b": (d,)}


def _ff_shapes(d: int, f: int) -> dict[str, tuple[int, ...]]:
    return {"w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,)}


def _prefixed(prefix: str, shapes: dict[str, tuple[int, ...]]) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.{k}": v for k, v in shapes.items()}


def _encoder_layout(c: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, out = c.d_model, {}
    for l in range(c.n_enc_layers):
        out |= _prefixed(f"enc.{l}.ln_self", _ln_shapes(d))
        out |= _prefixed(f"enc.{l}.self", _attn_shapes(d))
        out |= _prefixed(f"enc.{l}.ln_ff", _ln_shapes(d))
        out |= _prefixed(f"enc.{l}.ff", _ff_shapes(d, c.d_ff))
    out |= _prefixed("enc.ln_out", _ln_shapes(d))
    return out


def _decoder_layout(c: ModelConfig, name: str) -> dict[str, tuple[int, ...]]:
    d, out = c.d_model, {}
    for l in range(c.n_dec_layers):
        out |= _prefixed(f"{name}.{l}.ln_self", _ln_shapes(d))
        out |= _prefixed(f"{name}.{l}.self", _attn_shapes(d))
        out |= _prefixed(f"{name}.{l}.ln_cross", _ln_shapes(d))
        out |= _prefixed(f"{name}.{l}.cross", _attn_shapes(d))
        out |= _prefixed(f"{name}.{l}.ln_ff", _ln_shapes(d))
        out |= _prefixed(f"{name}.{l}.ff", _ff_shapes(d, c.d_ff))
    out |= _prefixed(f"{name}.ln_out", _ln_shapes(d))
    return out


def _mutual_layout(c: ModelConfig, name: str) -> dict[str, tuple[int, ...]]:
    out = {}
    for l in range(c.n_dec_layers):
        out |= _prefixed(f"{name}.{l}.ln", _ln_shapes(c.d_model))
        out |= _prefixed(f"{name}.{l}.attn", _attn_shapes(c.d_model))
    return out


def decoder_names(variant: str) -> tuple[str, str]:
    """Storage prefixes used by decoder 1 and decoder 2."""
    return ("dec1", "dec2") if variant == "dual" else ("dec", "dec")


def mutual_names(variant: str) -> tuple[str, str] | None:
    if variant == "base":
        return None
    return ("mut1", "mut2") if variant == "dual" else ("mut", "mut")


def parameter_layout(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of every distinct stored tensor, keyed by storage name."""
    layout = {"embed": (config.vocab_size, config.d_model)}
    layout |= _encoder_layout(config)
    for name in dict.fromkeys(decoder_names(config.variant)):
        layout |= _decoder_layout(config, name)
    muts = mutual_names(config.variant)
    if muts:
        for name in dict.fromkeys(muts):
            layout |= _mutual_layout(config, name)
    return layout


def _init_array(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if len(shape) == 2:
        limit = math.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-limit, limit, size=shape)
    if leaf == "g":
        return np.ones(shape)
    return np.zeros(shape)


class Parameters(Mapping):
    """Named tensor store.

    Keys are storage names. Decoder tensors are reached through
    :meth:`decoder` / :meth:`mutual`, which map a decoder id onto its storage
    prefix, so in the shared variant both ids resolve to the very same tensors.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = parameter_layout(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ValueError(f"parameter names mismatch: missing={missing[:3]} extra={extra[:3]}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self._tensors = tensors

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "Parameters":
        rng = np.random.default_rng(seed)
        tensors = {
            name: Tensor(_init_array(name, shape, rng), requires_grad=True, name=name)
            for name, shape in parameter_layout(config).items()
        }
        return cls(config, tensors)

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Mapping[str, np.ndarray]) -> "Parameters":
        return cls(config, {k: Tensor(np.array(v), requires_grad=True, name=k) for k, v in arrays.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def decoder(self, decoder_id: int, name: str) -> Tensor:
        return self._tensors[f"{decoder_names(self.config.variant)[decoder_id - 1]}.{name}"]

    def mutual(self, decoder_id: int, name: str) -> Tensor:
        muts = mutual_names(self.config.variant)
        if muts is None:
            raise KeyError("base variant has no decoder-decoder attention")
        return self._tensors[f"{muts[decoder_id - 1]}.{name}"]

    @property
    def encoder_embedding(self) -> Tensor:
        return self._tensors["embed"]

    @property
    def decoder_embedding(self) -> Tensor:
        return self._tensors["embed"]

    @property
    def output_projection(self) -> Tensor:
        return self._tensors["embed"]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def copy(self) -> "Parameters":
        return Parameters.from_arrays(self.config, self.arrays())

    def mutual_tensor_names(self) -> list[str]:
        muts = mutual_names(self.config.variant) or ()
        return [k for k in self._tensors if k.split(".", 1)[0] in muts]

    def zero_mutual_output(self) -> None:
        """Zero the output projection of every decoder-decoder attention sublayer."""
        for k in self.mutual_tensor_names():
            if k.endswith(".attn.wo") or k.endswith(".attn.bo"):
                self._tensors[k].data[...] = 0.0


# ---------------------------------------------------------------------------
# parameter accounting


def count_parameters(config: ModelConfig, variant: str | None = None) -> dict:
    """Closed-form parameter count, split by group."""
    variant = variant or config.variant
    d, f, V = config.d_model, config.d_ff, config.vocab_size
    attn = 4 * (d * d + d)
    ln = 2 * d
    ff = d * f + f + f * d + d
    enc = config.n_enc_layers * (attn + ff + 2 * ln) + ln
    dec = config.n_dec_layers * (2 * attn + ff + 3 * ln) + ln
    mutual = config.n_dec_layers * (attn + ln)
    groups = {"embeddings": V * d, "encoder": enc}
    if variant == "base":
        groups["decoder"] = dec
        groups["decoder_decoder_attention"] = 0
    elif variant == "dual":
        groups["decoder1"] = dec
        groups["decoder2"] = dec
        groups["decoder_decoder_attention"] = 2 * mutual
    elif variant == "shared":
        groups["decoder"] = dec
        groups["decoder_decoder_attention"] = mutual
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return {"total": sum(groups.values()), "by_group": groups}


def count_tensor_elements(params: Parameters) -> int:
    seen: dict[int, int] = {}
    for t in params.values():
        seen[id(t)] = t.size
    return sum(seen.values())


# ---------------------------------------------------------------------------
# forward computation


def positional_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def mutual_mask(n_q: int, n_k: int, key_lengths=None) -> np.ndarray:
    """Diagonal-causal decoder-decoder mask: query ``i`` sees keys ``j <= i``.

    ``key_lengths`` (one per batch row) additionally hides partner positions
    at or beyond that length.
    """
    m = np.arange(n_k)[None, :] <= np.arange(n_q)[:, None]
    if key_lengths is not None:
        lengths = np.asarray(key_lengths)
        m = m[None] & (np.arange(n_k)[None, None, :] < lengths[:, None, None])
    return m


def _ln(params: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _attn(p: Mapping[str, Tensor], prefix: str, xq: Tensor, xkv: Tensor, mask, n_heads: int) -> Tensor:
    q = ad.linear(xq, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k = ad.linear(xkv, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v = ad.linear(xkv, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    a = ad.attention(q, k, v, mask, n_heads)
    return ad.linear(a, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _ff(p: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    h = ad.relu(ad.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return ad.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


class _DecoderView(Mapping):
    """Relative-name view onto one decoder's tensors."""

    def __init__(self, params: Parameters, decoder_id: int):
        self._params = params
        self._prefix = decoder_names(params.config.variant)[decoder_id - 1]

    def __getitem__(self, name: str) -> Tensor:
        return self._params[f"{self._prefix}.{name}"]

    def __iter__(self):
        return (k for k in self._params if k.startswith(self._prefix + "."))

    def __len__(self):
        return sum(1 for _ in self)


class Transformer:
    """A model = config + parameters, with encoder/decoder forward passes.

    Token inputs may be 1-D (a single sequence) or 2-D (a padded batch); the
    returned tensors carry the same leading axes.
    """

    def __init__(self, config: ModelConfig, params: Parameters | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else Parameters.initialize(config, seed)
        if self.params.config.variant != config.variant:
            raise ValueError("parameter variant does not match config")
        self.training = False
        self.rng: np.random.Generator | None = None

    # -- helpers -----------------------------------------------------------

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.shape[-1] == 0:
            raise ValueError("empty input")
        if ids.shape[-1] > self.config.max_len:
            raise ValueError(f"input length {ids.shape[-1]} exceeds max_len {self.config.max_len}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError("token id out of vocabulary")

    def _embed(self, ids: np.ndarray) -> Tensor:
        d = self.config.d_model
        x = ad.embedding(ids, self.params["embed"])
        x = ad.scale(x, math.sqrt(d))
        x = ad.add_constant(x, positional_encoding(ids.shape[-1], d))
        return ad.dropout(x, self.config.dropout, self.rng, self.training)

    def _drop(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.config.dropout, self.rng, self.training)

    def padding_mask(self, src) -> np.ndarray | None:
        src = np.asarray(src)
        if src.ndim == 1:
            return None
        return (src != self.config.pad_id)[:, None, :]

    # -- encoder -----------------------------------------------------------

    def encode(self, src) -> Tensor:
        src = np.asarray(src, dtype=np.int64)
        self._check_ids(src)
        p, h = self.params, self.config.n_heads
        mask = self.padding_mask(src)
        x = self._embed(src)
        for l in range(self.config.n_enc_layers):
            y = _ln(p, f"enc.{l}.ln_self", x)
            x = ad.add(x, self._drop(_attn(p, f"enc.{l}.self", y, y, mask, h)))
            y = _ln(p, f"enc.{l}.ln_ff", x)
            x = ad.add(x, self._drop(_ff(p, f"enc.{l}.ff", y)))
        return _ln(p, "enc.ln_out", x)

    # -- decoders ----------------------------------------------------------

    def _dec_self(self, view, l: int, x: Tensor) -> Tensor:
        y = _ln(view, f"{l}.ln_self", x)
        return ad.add(x, self._drop(_attn(view, f"{l}.self", y, y, causal_mask(x.shape[-2]), self.config.n_heads)))

    def _dec_rest(self, view, l: int, x: Tensor, enc: Tensor, enc_mask) -> Tensor:
        h = self.config.n_heads
        y = _ln(view, f"{l}.ln_cross", x)
        x = ad.add(x, self._drop(_attn(view, f"{l}.cross", y, enc, enc_mask, h)))
        y = _ln(view, f"{l}.ln_ff", x)
        return ad.add(x, self._drop(_ff(view, f"{l}.ff", y)))

    def _mutual(self, decoder_id: int, l: int, x: Tensor, partner: Tensor, mask) -> Tensor:
        p = self.params
        muts = mutual_names(self.config.variant)
        prefix = f"{muts[decoder_id - 1]}.{l}"
        q = _ln(p, f"{prefix}.ln", x)
        kv = _ln(p, f"{prefix}.ln", partner)
        return ad.add(x, self._drop(_attn(p, f"{prefix}.attn", q, kv, mask, self.config.n_heads)))

    def _logits(self, view, x: Tensor) -> Tensor:
        y = _ln(view, "ln_out", x)
        return ad.matmul(y, self.params["embed"], transpose_b=True)

    def single_forward(self, enc_states: Tensor, y_inputs, decoder_id: int = 1, enc_mask=None) -> Tensor:
        """Logits of one decoder run without any partner stream."""
        if self.config.variant == "base" and decoder_id != 1:
            raise ValueError("base variant has a single decoder")
        y = np.asarray(y_inputs, dtype=np.int64)
        self._check_ids(y)
        view = _DecoderView(self.params, decoder_id)
        x = self._embed(y)
        for l in range(self.config.n_dec_layers):
            x = self._dec_self(view, l, x)
            x = self._dec_rest(view, l, x, enc_states, enc_mask)
        return self._logits(view, x)

    def dual_forward(
        self,
        enc_states: Tensor,
        y1_inputs,
        y2_inputs,
        enc_mask=None,
        key_lengths: tuple | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Run both decoders in lockstep; returns ``(logits1, logits2)``.

        ``key_lengths`` optionally caps, per batch row, how many partner
        positions each stream's decoder-decoder attention may see (used for
        forced-prefix decoding).
        """
        if self.config.variant == "base":
            raise ValueError("no dual path")
        y1 = np.asarray(y1_inputs, dtype=np.int64)
        y2 = np.asarray(y2_inputs, dtype=np.int64)
        self._check_ids(y1)
        self._check_ids(y2)
        t1, t2 = y1.shape[-1], y2.shape[-1]
        lim1, lim2 = key_lengths if key_lengths is not None else (None, None)
        m12 = mutual_mask(t1, t2, lim1)
        m21 = mutual_mask(t2, t1, lim2)
        v1, v2 = _DecoderView(self.params, 1), _DecoderView(self.params, 2)
        x1, x2 = self._embed(y1), self._embed(y2)
        for l in range(self.config.n_dec_layers):
            h1 = self._dec_self(v1, l, x1)
            h2 = self._dec_self(v2, l, x2)
            m1 = self._mutual(1, l, h1, h2, m12)
            m2 = self._mutual(2, l, h2, h1, m21)
            x1 = self._dec_rest(v1, l, m1, enc_states, enc_mask)
            x2 = self._dec_rest(v2, l, m2, enc_states, enc_mask)
        return self._logits(v1, x1), self._logits(v2, x2)


# ---------------------------------------------------------------------------
# initialisation from a pretrained single-decoder model

INIT_SCHEMES = ("subtitle-only", "both", "shared")


def init_from_pretrained(target: Parameters, pretrained: Parameters, scheme: str) -> Parameters:
    """Copy encoder, embeddings and (per ``scheme``) the decoder of a base model.

    ``target`` supplies the freshly initialised tensors for everything that is
    not copied; decoder-decoder attention always keeps its random values.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    tc, pc = target.config, pretrained.config
    if pc.variant != "base":
        raise ValueError("pretrained model must be a base variant")
    if (tc.vocab_size, tc.d_model, tc.d_ff, tc.n_heads, tc.n_enc_layers, tc.n_dec_layers) != (
        pc.vocab_size, pc.d_model, pc.d_ff, pc.n_heads, pc.n_enc_layers, pc.n_dec_layers
    ):
        raise ValueError("pretrained config is not compatible with the target")
    if (scheme == "shared") != (tc.variant == "shared"):
        raise ValueError(f"scheme {scheme!r} does not fit variant {tc.variant!r}")

    arrays = target.arrays()
    src = pretrained.arrays()
    for name, value in src.items():
        if name == "embed" or name.startswith("enc."):
            arrays[name] = value.copy()
    dec_targets = {"subtitle-only": ["dec2"], "both": ["dec1", "dec2"], "shared": ["dec"]}[scheme]
    for name, value in src.items():
        if name.startswith("dec."):
            rest = name[len("dec."):]
            for prefix in dec_targets:
                arrays[f"{prefix}.{rest}"] = value.copy()
    return Parameters.from_arrays(tc, arrays)


# ---------------------------------------------------------------------------
# checkpoint container


def vocab_hash(tokens) -> str:
    return hashlib.sha256("\n".join(tokens).encode("utf-8")).hexdigest()[:16]


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(array), allow_pickle=False)
    return buf.getvalue()


def write_container(path, meta: dict, arrays: Mapping[str, np.ndarray]) -> None:
    """Zip container of ``.npy`` members plus ``meta.json``, with fixed timestamps."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, _npy_bytes(arrays[name]))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
    return meta, arrays


def save_model(path, model: Transformer, vocab_id: str = "", extra: dict | None = None) -> None:
    meta = {"format": CHECKPOINT_FORMAT, "config": model.config.to_dict(), "vocab_hash": vocab_id,
            "extra": extra or {}}
    write_container(path, meta, {f"param/{k}": v for k, v in model.params.arrays().items()})


def load_model(path, expected_vocab_hash: str | None = None) -> tuple[Transformer, dict]:
    meta, arrays = read_container(path)
    if expected_vocab_hash is not None and meta["vocab_hash"] != expected_vocab_hash:
        raise ValueError("vocabulary hash mismatch between checkpoint and data")
    config = ModelConfig(**meta["config"])
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    return Transformer(config, Parameters.from_arrays(config, params)), meta
