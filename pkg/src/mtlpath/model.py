"""Recurrent cells, the shared-encoder multi-task network, baselines, decoding, checkpoints.

All architectures share one parameter naming scheme, so identically named
tensors get identical initial values for a given seed regardless of the
architecture that owns them:

    embed                  concept embedding table, shared by encoder and decoders
    enc.{Wx,Wh,b}          encoder cell (the single network for ``rnn``/``lstm``)
    path_dec.{Wx,Wh,b}     path decoder cell (seq2seq and multitask)
    path_out.{W,b}         concept logits
    dkt_dec.{Wx,Wh,b}      knowledge-tracing decoder cell (multitask only)
    dkt_out.{W,b}          correctness logit
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import ContractError, ParameterStore, ShapeError, Tensor

ARCHITECTURES = (
    "rnn",
    "lstm",
    "seq2seq_rnn",
    "seq2seq_lstm",
    "seq2seq_rnn_attn",
    "seq2seq_lstm_attn",
    "multitask_lstm",
)
BASELINES = ARCHITECTURES[:-1]

CHECKPOINT_MAGIC = b"MTLP"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 128
    hidden_units: int = 64
    n: int = 10
    m: int = 3
    architecture: str = "multitask_lstm"
    no_repeat_decoding: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; valid tags: {', '.join(ARCHITECTURES)}")
        for name in ("vocab_size", "embed_dim", "hidden_units", "n", "m"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def cell(self) -> str:
        return "rnn" if "rnn" in self.architecture else "lstm"

    @property
    def seq2seq(self) -> bool:
        return self.architecture.startswith("seq2seq") or self.architecture == "multitask_lstm"

    @property
    def attention(self) -> bool:
        return self.architecture.endswith("_attn")

    @property
    def has_dkt(self) -> bool:
        return self.architecture == "multitask_lstm"

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})


@dataclass
class CellState:
    h: Tensor
    c: Tensor | None = None


@dataclass
class PredictionBatch:
    path_probs: Tensor  # [batch, m, |T|]
    dkt_probs: Tensor  # [batch, m]
    decoded: np.ndarray  # [batch, m]
    attention: list[np.ndarray] = field(default_factory=list)  # per step, [batch, n]


# --- initialisation ------------------------------------------------------


def task_for(name: str) -> str:
    if name == "embed" or name.startswith("enc."):
        return "shared"
    if name.startswith("dkt_"):
        return "dkt"
    return "path"


def _uniform(name: str, shape, fan_in: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_cell(store: ParameterStore, prefix: str, cell: str, in_dim: int, hidden: int, seed: int) -> None:
    gates = 4 if cell == "lstm" else 1
    task = task_for(prefix + ".")
    store.add(f"{prefix}.Wx", _uniform(f"{prefix}.Wx", (in_dim, gates * hidden), in_dim, seed), task)
    store.add(f"{prefix}.Wh", _uniform(f"{prefix}.Wh", (hidden, gates * hidden), hidden, seed), task)
    b = np.zeros(gates * hidden)
    if cell == "lstm":
        b[hidden : 2 * hidden] = 1.0  # forget gate
    store.add(f"{prefix}.b", b, task)


def init_params(config: ModelConfig, seed: int = 0) -> ParameterStore:
    """Fresh parameters: uniform(+-1/sqrt(fan_in)) weights, zero biases, forget bias 1."""
    T, E, H = config.vocab_size, config.embed_dim, config.hidden_units
    store = ParameterStore()
    store.add("embed", _uniform("embed", (T, E), E, seed), "shared")
    _add_cell(store, "enc", config.cell, E, H, seed)
    if config.seq2seq:
        dec_in = E + H if config.attention else E
        _add_cell(store, "path_dec", config.cell, dec_in, H, seed)
    store.add("path_out.W", _uniform("path_out.W", (H, T), H, seed), "path")
    store.add("path_out.b", np.zeros(T), "path")
    if config.has_dkt:
        _add_cell(store, "dkt_dec", "lstm", E, H, seed)
        store.add("dkt_out.W", _uniform("dkt_out.W", (H, 1), H, seed), "dkt")
        store.add("dkt_out.b", np.zeros(1), "dkt")
    return store


def cell_params(store: ParameterStore, prefix: str) -> tuple[Tensor, Tensor, Tensor]:
    return store[f"{prefix}.Wx"], store[f"{prefix}.Wh"], store[f"{prefix}.b"]


# --- cells ---------------------------------------------------------------


def lstm_cell_step(x: Tensor, state: CellState, params) -> CellState:
    Wx, Wh, b = params
    H = Wh.shape[0]
    if x.shape[1] != Wx.shape[0] or state.h.shape[1] != H or Wx.shape[1] != 4 * H:
        raise ShapeError(f"lstm_cell_step: x {x.shape}, h {state.h.shape}, Wx {Wx.shape}, Wh {Wh.shape}")
    z = nx.add(nx.linear(x, Wx, b), nx.matmul(state.h, Wh))
    i = nx.sigmoid(nx.slice_last(z, 0, H))
    f = nx.sigmoid(nx.slice_last(z, H, 2 * H))
    g = nx.tanh(nx.slice_last(z, 2 * H, 3 * H))
    o = nx.sigmoid(nx.slice_last(z, 3 * H, 4 * H))
    c = nx.add(nx.mul(f, state.c), nx.mul(i, g))
    h = nx.mul(o, nx.tanh(c))
    return CellState(h, c)


def rnn_cell_step(x: Tensor, state: CellState, params) -> CellState:
    Wx, Wh, b = params
    if x.shape[1] != Wx.shape[0] or state.h.shape[1] != Wh.shape[0] or Wx.shape[1] != Wh.shape[1]:
        raise ShapeError(f"rnn_cell_step: x {x.shape}, h {state.h.shape}, Wx {Wx.shape}, Wh {Wh.shape}")
    return CellState(nx.tanh(nx.add(nx.linear(x, Wx, b), nx.matmul(state.h, Wh))))


def _step(cell: str, x: Tensor, state: CellState, params) -> CellState:
    return lstm_cell_step(x, state, params) if cell == "lstm" else rnn_cell_step(x, state, params)


def zero_state(batch: int, hidden: int, cell: str) -> CellState:
    dt = nx.get_dtype()
    h = Tensor(np.zeros((batch, hidden), dtype=dt))
    return CellState(h, Tensor(np.zeros((batch, hidden), dtype=dt)) if cell == "lstm" else None)


def _check_ids(ids, config: ModelConfig, what: str, length: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] != length:
        raise ShapeError(f"{what}: expected [batch, {length}] ids, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ContractError(f"{what}: concept id out of range [0, {config.vocab_size})")
    return ids


def _run_encoder(input_ids: np.ndarray, config: ModelConfig, store: ParameterStore):
    B, n = input_ids.shape
    emb = nx.take_rows(store["embed"], input_ids)  # [B, n, E]
    params = cell_params(store, "enc")
    state = zero_state(B, config.hidden_units, config.cell)
    hs = []
    for t in range(n):
        state = _step(config.cell, nx.select(emb, t), state, params)
        hs.append(state.h)
    return hs, state


def encode_shared(input_ids, config: ModelConfig, store: ParameterStore) -> Tensor:
    """Embed the history and unroll the encoder from a zero state; returns [batch, n, hidden]."""
    ids = _check_ids(input_ids, config, "encode_shared", config.n)
    hs, _ = _run_encoder(ids, config, store)
    return nx.stack(hs, axis=1)


# --- decoding ------------------------------------------------------------


def _argmax_masked(probs: np.ndarray, used: np.ndarray | None) -> np.ndarray:
    if used is None:
        return probs.argmax(axis=-1)
    return np.where(used, -np.inf, probs).argmax(axis=-1)


def greedy_decode(path_probs, no_repeat: bool = False) -> np.ndarray:
    """Per-step argmax (lowest index wins ties); optionally forbid repeats within a sample."""
    p = path_probs.data if isinstance(path_probs, Tensor) else np.asarray(path_probs)
    B, m, T = p.shape
    if no_repeat and m > T:
        raise ContractError(f"greedy_decode: cannot pick {m} distinct concepts from {T}")
    out = np.zeros((B, m), dtype=np.int64)
    used = np.zeros((B, T), dtype=bool) if no_repeat else None
    for i in range(m):
        out[:, i] = _argmax_masked(p[:, i], used)
        if used is not None:
            used[np.arange(B), out[:, i]] = True
    return out


class _Decoder:
    """Feeds either teacher targets or the model's own choices, one step at a time."""

    def __init__(self, input_ids, teacher, config: ModelConfig, training: bool):
        B = input_ids.shape[0]
        self.config = config
        self.training = training
        self.prev = input_ids[:, -1].copy()
        self.teacher = teacher
        self.decoded = np.zeros((B, config.m), dtype=np.int64)
        no_repeat = config.no_repeat_decoding and not training
        if no_repeat and config.m > config.vocab_size:
            raise ContractError(f"no-repeat decoding needs m <= |T| ({config.m} > {config.vocab_size})")
        self.used = np.zeros((B, config.vocab_size), dtype=bool) if no_repeat else None

    def advance(self, i: int, probs: Tensor) -> None:
        choice = _argmax_masked(probs.data, self.used)
        self.decoded[:, i] = choice
        if self.used is not None:
            self.used[np.arange(len(choice)), choice] = True
        self.prev = self.teacher[:, i] if self.training else choice


def _prepare(input_ids, teacher_targets, config: ModelConfig, training: bool):
    ids = _check_ids(input_ids, config, "forward", config.n)
    teacher = None
    if training:
        if teacher_targets is None:
            raise ContractError("teacher_targets are required in training mode")
        teacher = _check_ids(teacher_targets, config, "teacher_targets", config.m)
        if teacher.shape[0] != ids.shape[0]:
            raise ShapeError("teacher_targets batch size differs from input_ids")
    return ids, teacher


def _path_probs(h: Tensor, store: ParameterStore) -> Tensor:
    return nx.softmax_rows(nx.linear(h, store["path_out.W"], store["path_out.b"]))


def multitask_forward(input_ids, teacher_targets, config: ModelConfig, store: ParameterStore, training: bool = False) -> PredictionBatch:
    """Shared LSTM encoder whose final state seeds a path decoder and a correctness decoder.

    Both decoders read the embedding of the previous path item: the teacher
    target while training, the path decoder's own choice otherwise.
    """
    if config.architecture != "multitask_lstm":
        raise ConfigError(f"multitask_forward needs architecture multitask_lstm, got {config.architecture}")
    ids, teacher = _prepare(input_ids, teacher_targets, config, training)
    _, enc_state = _run_encoder(ids, config, store)
    dec = _Decoder(ids, teacher, config, training)
    path_p, dkt_p = cell_params(store, "path_dec"), cell_params(store, "dkt_dec")
    s_path = s_dkt = enc_state
    path_steps, dkt_steps = [], []
    for i in range(config.m):
        x = nx.take_rows(store["embed"], dec.prev)
        s_path = lstm_cell_step(x, s_path, path_p)
        s_dkt = lstm_cell_step(x, s_dkt, dkt_p)
        probs = _path_probs(s_path.h, store)
        path_steps.append(probs)
        dkt_steps.append(nx.sigmoid(nx.linear(s_dkt.h, store["dkt_out.W"], store["dkt_out.b"])))
        dec.advance(i, probs)
    return PredictionBatch(nx.stack(path_steps, axis=1), nx.concat(dkt_steps, axis=-1), dec.decoded)


def _attend(enc_seq: Tensor, query: Tensor) -> tuple[Tensor, Tensor]:
    weights = nx.softmax_rows(nx.bmm_vec(enc_seq, query))  # [B, n]
    return nx.weighted_sum(weights, enc_seq), weights


def baseline_forward(input_ids, teacher_targets, config: ModelConfig, store: ParameterStore, training: bool = False) -> PredictionBatch:
    """Single-task baselines.

    ``rnn``/``lstm`` keep rolling the encoder cell past the history, reading out
    a prediction before each new input. ``seq2seq_*`` hand the encoder's final
    state to a separate decoder cell; ``*_attn`` decoders also take a
    dot-product attention context over all encoder states.
    """
    if config.architecture not in BASELINES:
        raise ConfigError(f"baseline_forward: {config.architecture!r} is not a baseline; valid: {', '.join(BASELINES)}")
    ids, teacher = _prepare(input_ids, teacher_targets, config, training)
    hs, state = _run_encoder(ids, config, store)
    dec = _Decoder(ids, teacher, config, training)
    steps, attn = [], []
    embed = store["embed"]

    if not config.seq2seq:
        params = cell_params(store, "enc")
        for i in range(config.m):
            if i > 0:
                state = _step(config.cell, nx.take_rows(embed, dec.prev), state, params)
            probs = _path_probs(state.h, store)
            steps.append(probs)
            dec.advance(i, probs)
    else:
        params = cell_params(store, "path_dec")
        enc_seq = nx.stack(hs, axis=1) if config.attention else None
        for i in range(config.m):
            x = nx.take_rows(embed, dec.prev)
            if enc_seq is not None:
                ctx, w = _attend(enc_seq, state.h)
                attn.append(w.data)
                x = nx.concat([x, ctx], axis=-1)
            state = _step(config.cell, x, state, params)
            probs = _path_probs(state.h, store)
            steps.append(probs)
            dec.advance(i, probs)

    B = ids.shape[0]
    dkt = Tensor(np.full((B, config.m), 0.5, dtype=nx.get_dtype()))
    return PredictionBatch(nx.stack(steps, axis=1), dkt, dec.decoded, attn)


def forward(store: ParameterStore, config: ModelConfig, input_ids, teacher_targets=None, training: bool = False) -> PredictionBatch:
    fn = multitask_forward if config.has_dkt else baseline_forward
    return fn(input_ids, teacher_targets, config, store, training=training)


# --- checkpoints ---------------------------------------------------------


def save_checkpoint(store: ParameterStore, config: ModelConfig, path) -> None:
    """Write ``MTLP`` | u32 version | config JSON | entries, all little-endian."""
    cfg = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(cfg)), cfg]
    for name, t in store.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, k: int) -> bytes:
        if self.pos + k > len(self.buf):
            raise OSError(f"{self.path}: truncated checkpoint (wanted {k} bytes at offset {self.pos})")
        out = self.buf[self.pos : self.pos + k]
        self.pos += k
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def load_checkpoint(path) -> tuple[ParameterStore, ModelConfig]:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        config = ModelConfig(**json.loads(r.take(r.u32()).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable config ({exc})") from None
    store = ParameterStore()
    while not r.done:
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        store.add(name, data.astype(np.float32), task_for(name))
    return store, config
