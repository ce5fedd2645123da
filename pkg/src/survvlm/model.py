"""Desk-scale vision-language survival model.

Topology: frozen 3-D conv encoder -> linear projection into the word-embedding
space -> causal transformer decoder (tied output) with a survival branch made
of a residual bottleneck adaptor and either a linear risk head (continuous)
or a softmax over time bins (discrete).

Parameters live in plain numpy arrays grouped by role (:data:`GROUP_ORDER`);
forward functions take the :class:`Tensor` view returned by
:meth:`ModelParams.tensors` so gradients flow only into unfrozen groups.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import stream

GROUP_ORDER = ("encoder", "projection", "decoder", "adaptor", "head_continuous", "head_discrete")
HEADS = ("continuous", "discrete")
N_QUESTIONS = 6


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 2000
    d_text: int = 64
    d_vis: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 96
    volume_shape: tuple[int, int, int] = (24, 24, 16)
    encoder_strides: tuple[tuple[int, int, int], ...] = ((2, 2, 2), (2, 2, 2), (2, 2, 1))
    encoder_channels: tuple[int, ...] = (8, 16, 32)
    adaptor_bottleneck: int | None = None
    head: str = "continuous"
    k_bins: int = 5
    tie_output: bool = True

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.d_text % self.n_heads:
            raise ValueError("d_text must be divisible by n_heads")
        if len(self.encoder_strides) != len(self.encoder_channels):
            raise ValueError("one channel count per encoder stride")
        if self.encoder_channels[-1] != self.d_vis:
            raise ValueError("last encoder channel count must equal d_vis")
        object.__setattr__(self, "volume_shape", tuple(int(s) for s in self.volume_shape))
        object.__setattr__(self, "encoder_strides", tuple(tuple(int(v) for v in s) for s in self.encoder_strides))
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))

    @property
    def bottleneck(self) -> int:
        return self.adaptor_bottleneck or max(self.d_text // 4, 1)

    @property
    def feature_grid(self) -> tuple[int, int, int]:
        grid = list(self.volume_shape)
        for s in self.encoder_strides:
            for a in range(3):
                if grid[a] % s[a]:
                    raise ValueError(f"volume shape {self.volume_shape} not divisible by strides {self.encoder_strides}")
                grid[a] //= s[a]
        return tuple(grid)

    @property
    def n_visual_tokens(self) -> int:
        gx, gy, _ = self.feature_grid
        return gx * gy

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["volume_shape"] = tuple(d["volume_shape"])
        d["encoder_strides"] = tuple(tuple(s) for s in d["encoder_strides"])
        d["encoder_channels"] = tuple(d["encoder_channels"])
        return cls(**d)


def _param_shapes(cfg: ModelConfig) -> dict[str, dict[str, tuple[int, ...]]]:
    enc = {}
    c_in = 1
    for i, (s, c_out) in enumerate(zip(cfg.encoder_strides, cfg.encoder_channels)):
        enc[f"conv{i}.w"] = (int(np.prod(s)) * c_in, c_out)
        enc[f"conv{i}.b"] = (c_out,)
        c_in = c_out
    D, F = cfg.d_text, cfg.d_ff
    dec = {"tok_emb": (cfg.vocab_size, D), "pos_emb": (cfg.max_len, D)}
    for l in range(cfg.n_layers):
        p = f"l{l}."
        dec.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "wq": (D, D), p + "wk": (D, D), p + "wv": (D, D), p + "wo": (D, D),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "w1": (D, F), p + "b1": (F,), p + "w2": (F, D), p + "b2": (D,),
        })
    dec["lnf.g"] = (D,)
    dec["lnf.b"] = (D,)
    if not cfg.tie_output:
        dec["out.w"] = (cfg.vocab_size, D)
    B = cfg.bottleneck
    return {
        "encoder": enc,
        "projection": {"W": (D, cfg.d_vis)},
        "decoder": dec,
        "adaptor": {"down": (B, D), "up": (D, B)},
        "head_continuous": {"w": (D,), "b": (1,)},
        "head_discrete": {"W": (cfg.k_bins, D), "b": (cfg.k_bins,)},
    }


def _init_array(name: str, group: str, shape, rng: np.random.Generator, cfg: ModelConfig) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("g",):
        return np.ones(shape)
    if leaf in ("b", "b1", "b2") or (group == "adaptor" and leaf == "up"):
        # zero Up makes the residual adaptor the identity at initialisation
        return np.zeros(shape)
    if group == "encoder":
        return rng.standard_normal(shape) * math.sqrt(2.0 / shape[0])
    if group == "projection":
        return rng.standard_normal(shape) / math.sqrt(shape[1])
    if group.startswith("head"):
        # unit-scale risk gradients on z_surv from the first step; a tiny head
        # lets the dispersion and alignment terms collapse z_surv first
        return rng.standard_normal(shape) / math.sqrt(cfg.d_text)
    if leaf in ("tok_emb", "pos_emb", "w"):
        return rng.standard_normal(shape) * 0.02
    # fan-in scaling keeps attention and MLP outputs comparable to the
    # residual stream, so context reaches the last position from the start
    scale = 1.0 / math.sqrt(shape[1] if leaf == "down" else shape[0])
    if leaf in ("wo", "w2"):
        scale /= math.sqrt(2 * cfg.n_layers)
    return rng.standard_normal(shape) * scale


@dataclass
class ModelParams:
    """Parameter store partitioned into named groups with freeze flags."""

    config: ModelConfig
    groups: dict[str, dict[str, np.ndarray]]
    frozen: dict[str, bool] = field(default_factory=lambda: {g: False for g in GROUP_ORDER})

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ModelParams":
        groups = {}
        for g, shapes in _param_shapes(config).items():
            groups[g] = {
                name: _init_array(name, g, shape, stream(seed, f"init/{g}/{name}"), config)
                for name, shape in shapes.items()
            }
        return cls(config, groups)

    @property
    def active_head(self) -> str:
        return f"head_{self.config.head}"

    def tensors(self) -> dict[str, dict[str, Tensor]]:
        return {
            g: {n: Tensor(a, requires_grad=not self.frozen[g]) for n, a in arrs.items()}
            for g, arrs in self.groups.items()
        }

    def freeze(self, trainable: set[str]) -> None:
        for g in GROUP_ORDER:
            self.frozen[g] = g not in trainable

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {g: {n: a.copy() for n, a in arrs.items()} for g, arrs in self.groups.items()},
            dict(self.frozen),
        )

    def group_bytes(self, group: str) -> bytes:
        return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.groups[group].values())

    def n_parameters(self) -> int:
        return sum(a.size for arrs in self.groups.values() for a in arrs.values())


# -- vision side --------------------------------------------------------------
def encode_volume(enc: dict[str, Tensor], volume, cfg: ModelConfig) -> Tensor:
    """Volume [X, Y, Z] in HU -> visual tokens [P, d_vis].

    Non-overlapping strided convolutions (kernel = stride) with GELU between
    them, then the mean over the out-of-plane axis and a flatten of the
    in-plane grid.  The mean sums sorted values, so permuting the feature
    slabs along the out-of-plane axis leaves the output bit-identical.
    """
    v = ad.as_tensor(volume)
    if v.shape != cfg.volume_shape:
        raise ValueError(f"expected volume of shape {cfg.volume_shape}, got {v.shape}")
    cfg.feature_grid  # raises on indivisible shapes
    x = v.reshape(*v.shape, 1) * (1.0 / 1000.0)
    n_conv = len(cfg.encoder_strides)
    for i, (sx, sy, sz) in enumerate(cfg.encoder_strides):
        X, Y, Z, C = x.shape
        x = x.reshape(X // sx, sx, Y // sy, sy, Z // sz, sz, C)
        x = x.transpose(0, 2, 4, 1, 3, 5, 6).reshape((X // sx) * (Y // sy) * (Z // sz), sx * sy * sz * C)
        x = x @ enc[f"conv{i}.w"] + enc[f"conv{i}.b"]
        if i < n_conv - 1:
            x = ad.gelu(x)
        x = x.reshape(X // sx, Y // sy, Z // sz, -1)
    gx, gy, gz, c = x.shape
    pooled = ad.sort(x, axis=2).sum(axis=2) * (1.0 / gz)
    return pooled.reshape(gx * gy, c)


def project_visual(z_v: Tensor, w: Tensor) -> Tensor:
    """H_v = W . Z_v applied token-wise: [P, d_vis] -> [P, d_text]."""
    z_v, w = ad.as_tensor(z_v), ad.as_tensor(w)
    if w.ndim != 2 or z_v.ndim != 2 or w.shape[1] != z_v.shape[1]:
        raise ValueError(f"projection {w.shape} does not match visual tokens {z_v.shape}")
    return z_v @ w.T


# -- sequences ------------------------------------------------------------------
class Segment(enum.Enum):
    CLINICAL = "Clinical"
    IMAGE = "Image"
    QUESTION = "Question"
    ANSWER = "Answer"


@dataclass
class TokenSequence:
    ids: np.ndarray  # -1 at image positions
    embeddings: Tensor
    segments: list[Segment]
    loss_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def prompt_length(self) -> int:
        return len(self.ids) - int(self.loss_mask.sum())


def pack_sequence(
    clinical_ids: Sequence[int],
    h_v: Tensor,
    question_ids: Sequence[int],
    answer_ids: Sequence[int],
    tok_emb: Tensor,
) -> TokenSequence:
    """Clinical (optional) | Image | Question | Answer, with loss on Answer only."""
    parts, ids, segs = [], [], []
    for seg, toks in ((Segment.CLINICAL, clinical_ids), (Segment.IMAGE, None), (Segment.QUESTION, question_ids), (Segment.ANSWER, answer_ids)):
        if seg is Segment.IMAGE:
            parts.append(h_v)
            ids += [-1] * h_v.shape[0]
            segs += [seg] * h_v.shape[0]
        elif len(toks):
            toks = [int(t) for t in toks]
            if min(toks) < 0 or max(toks) >= tok_emb.shape[0]:
                raise ValueError("token id outside the vocabulary")
            parts.append(ad.take_rows(tok_emb, toks))
            ids += toks
            segs += [seg] * len(toks)
    ids = np.array(ids, dtype=np.int64)
    mask = np.array([s is Segment.ANSWER for s in segs], dtype=bool)
    return TokenSequence(ids, ad.concat(parts, axis=0), segs, mask)


# -- decoder ------------------------------------------------------------------
def _attention(h: Tensor, dec: dict[str, Tensor], prefix: str, n_heads: int) -> Tensor:
    B, L, D = h.shape
    dh = D // n_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, L, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(h @ dec[prefix + "wq"])
    k = heads(h @ dec[prefix + "wk"])
    v = heads(h @ dec[prefix + "wv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    causal = np.tril(np.ones((L, L), dtype=bool))
    att = ad.softmax(ad.where(causal, scores, -np.inf), axis=-1)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, D)
    return out @ dec[prefix + "wo"]


def decode_embeddings(
    dec: dict[str, Tensor], x: Tensor, cfg: ModelConfig, fixed_length: bool = True
) -> tuple[Tensor, Tensor]:
    """Causal decoder over a right-padded batch ``x`` [B, L, D].

    Returns (hidden [B, L, D], logits [B, L, V]).  Position i only sees
    positions <= i, so right padding never changes real positions.  With
    ``fixed_length`` the batch is padded to ``max_len`` internally, which
    makes every position's output bit-identical however long the sequence
    is; training turns it off for speed.
    """
    B, L, D = x.shape
    if L > cfg.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    if not fixed_length:
        h = x + dec["pos_emb"][:L]
        return _decoder_stack(dec, h, cfg)
    if L < cfg.max_len:
        # BLAS picks kernels by matrix size; a fixed length keeps every
        # position's arithmetic identical whatever the real length is
        x = ad.concat([x, Tensor(np.zeros((B, cfg.max_len - L, D)))], axis=1)
    hidden, logits = _decode_padded(dec, x, cfg)
    if L < cfg.max_len:
        hidden, logits = hidden[:, :L], logits[:, :L]
    return hidden, logits


def _decode_padded(dec: dict[str, Tensor], x: Tensor, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    return _decoder_stack(dec, x + dec["pos_emb"], cfg)


def _decoder_stack(dec: dict[str, Tensor], h: Tensor, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    for l in range(cfg.n_layers):
        p = f"l{l}."
        h = h + _attention(ad.layer_norm(h, dec[p + "ln1.g"], dec[p + "ln1.b"]), dec, p, cfg.n_heads)
        m = ad.layer_norm(h, dec[p + "ln2.g"], dec[p + "ln2.b"])
        h = h + ad.gelu(m @ dec[p + "w1"] + dec[p + "b1"]) @ dec[p + "w2"] + dec[p + "b2"]
    hidden = ad.layer_norm(h, dec["lnf.g"], dec["lnf.b"])
    out_w = dec["tok_emb"] if cfg.tie_output else dec["out.w"]
    return hidden, hidden @ out_w.T


def batch_embeddings(seqs: Sequence[TokenSequence]) -> tuple[Tensor, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    L = int(lengths.max())
    rows = []
    for s in seqs:
        e = s.embeddings
        if len(s) < L:
            e = ad.concat([e, Tensor(np.zeros((L - len(s), e.shape[1])))], axis=0)
        rows.append(e)
    return ad.stack(rows, axis=0), lengths


def decode(dec: dict[str, Tensor], seq: TokenSequence, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Single sequence: (hidden [L, D], logits [L, V])."""
    hidden, logits = decode_embeddings(dec, seq.embeddings.reshape(1, *seq.embeddings.shape), cfg)
    return hidden[0], logits[0]


def pool_hidden(hidden: Tensor, lengths=None) -> Tensor:
    """Mean over positions.  For a padded batch [B, L, D] pass ``lengths``."""
    if lengths is None:
        return hidden.mean(axis=-2)
    lengths = np.asarray(lengths)
    mask = (np.arange(hidden.shape[1])[None, :] < lengths[:, None]).astype(np.float64)
    return (hidden * mask[:, :, None]).sum(axis=1) / lengths[:, None].astype(np.float64)


# -- survival branch ---------------------------------------------------------
def survival_branch(adaptor: dict[str, Tensor], head: dict[str, Tensor], h_last: Tensor, kind: str):
    """Residual adaptor + head on the final-position hidden state(s).

    Returns (z_surv, risk) for the continuous head or (z_surv, probs) for the
    discrete head.  Works on a single vector [D] or a batch [B, D].
    """
    single = h_last.ndim == 1
    h = h_last.reshape(1, -1) if single else h_last
    z = h + ad.gelu(h @ adaptor["down"].T) @ adaptor["up"].T
    if kind == "continuous":
        out = (z @ head["w"].reshape(-1, 1)).reshape(-1) + head["b"]
    elif kind == "discrete":
        out = ad.softmax(z @ head["W"].T + head["b"], axis=-1)
    else:
        raise ValueError(f"unknown head {kind!r}")
    return (z[0], out[0]) if single else (z, out)


def discrete_risk_score(probs) -> float:
    """Sum over bins of the cumulative incidence; larger means earlier."""
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    return float(np.cumsum(p).sum())


# -- inference -----------------------------------------------------------------
@dataclass
class PatientInputs:
    """What the model sees for one patient: encoded volume and clinical tokens."""

    scan_id: str
    z_v: np.ndarray
    clinical_ids: list[int] = field(default_factory=list)


def _prompt_state(params: ModelParams, w, patient: PatientInputs, question_ids: Sequence[int]) -> Tensor:
    h_v = project_visual(Tensor(patient.z_v), w["projection"]["W"])
    seq = pack_sequence(patient.clinical_ids, h_v, question_ids, [], w["decoder"]["tok_emb"])
    hidden, _ = decode(w["decoder"], seq, params.config)
    return hidden[len(seq) - 1]


def predict_prompt(params: ModelParams, patient: PatientInputs, question_ids: Sequence[int], w=None):
    """Scalar risk (continuous) or bin probabilities (discrete) for one prompt."""
    w = w if w is not None else _frozen_view(params)
    h_last = _prompt_state(params, w, patient, question_ids)
    _, out = survival_branch(w["adaptor"], w[params.active_head], h_last, params.config.head)
    return float(out.data.reshape(())) if params.config.head == "continuous" else out.data.copy()


def ensemble_predict(
    params: ModelParams,
    patient: PatientInputs,
    questions: Sequence[Sequence[int]],
    n_questions: int | None = N_QUESTIONS,
) -> float:
    """Average the survival output over the fixed question prompts.

    Continuous: mean of the per-prompt risks.  Discrete: mean of the
    per-prompt bin probabilities, then :func:`discrete_risk_score`.  Sums use
    ``math.fsum`` so the result does not depend on prompt order.
    """
    if n_questions is not None and len(questions) != n_questions:
        raise ValueError(f"expected {n_questions} questions, got {len(questions)}")
    if not questions:
        raise ValueError("no questions")
    w = _frozen_view(params)
    outs = [predict_prompt(params, patient, q, w) for q in questions]
    if params.config.head == "continuous":
        return math.fsum(outs) / len(outs)
    stacked = np.stack(outs)
    mean = np.array([math.fsum(col) for col in stacked.T]) / len(outs)
    return discrete_risk_score(mean)


def generate(
    params: ModelParams,
    patient: PatientInputs,
    question_ids: Sequence[int],
    max_tokens: int,
    eoa_id: int,
    w=None,
) -> list[int]:
    """Greedy decoding after the question until ``eoa_id`` or ``max_tokens``."""
    w = w if w is not None else _frozen_view(params)
    dec = w["decoder"]
    h_v = project_visual(Tensor(patient.z_v), w["projection"]["W"])
    seq = pack_sequence(patient.clinical_ids, h_v, question_ids, [], dec["tok_emb"])
    x = seq.embeddings.data
    out: list[int] = []
    for _ in range(max_tokens):
        if x.shape[0] >= params.config.max_len:
            break
        _, logits = decode_embeddings(dec, Tensor(x[None]), params.config)
        nxt = int(np.argmax(logits.data[0, -1]))
        if nxt == eoa_id:
            break
        out.append(nxt)
        x = np.concatenate([x, dec["tok_emb"].data[nxt][None]], axis=0)
    return out


def _frozen_view(params: ModelParams) -> dict[str, dict[str, Tensor]]:
    return {g: {n: Tensor(a) for n, a in arrs.items()} for g, arrs in params.groups.items()}


def encode_all(params: ModelParams, volumes: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Visual tokens for every volume; the encoder is never trained, so these are cached."""
    enc = _frozen_view(params)["encoder"]
    return {k: encode_volume(enc, v, params.config).data for k, v in volumes.items()}
