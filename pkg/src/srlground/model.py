"""Grounding models: role-pooled query encoding, visual fusion, object and
multi-modal transformers with relative position encoding, proposal scorer,
loss, and the SEP-only verb-score head.

Three variants share one code path:
  imggrnd  - per-proposal scorer, no transformers
  vidgrnd  - object transformer without position encoding
  vognet   - object + multi-modal transformers with relative position encoding
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ContractError

VARIANTS = ("imggrnd", "vidgrnd", "vognet")

# Sinusoidal absolute-position code appended to every proposal's visual
# features. Attention dot products over sin/cos pairs can express functions
# of coordinate differences, so transformer variants can exploit geometry
# even without the relative-position bias.
POS_FREQS = (1.0, 2.0, 4.0, 8.0, 16.0)
D_POS_CODE = 5 * (1 + 2 * len(POS_FREQS))


def position_code(positions):
    """(N, 5) normalized positions -> (N, D_POS_CODE) sinusoidal features."""
    parts = [positions]
    for f in POS_FREQS:
        parts.append(np.sin(2.0 * np.pi * f * positions))
        parts.append(np.cos(2.0 * np.pi * f * positions))
    return np.concatenate(parts, axis=1)

UNK = "<unk>"


class SkipSample(Exception):
    """Raised when a sample has no groundable role and cannot contribute loss."""


@dataclass
class ModelConfig:
    d_word: int = 32
    d_hidden: int = 64  # BiLSTM output size (both directions together)
    d_q: int = 12
    d_v: int = 16
    d_s: int = 8
    d_fused: int = 48
    n_l: int = 1
    n_h: int = 4  # one head per cardinal relation plus reuse for appearance
    variant: str = "vognet"
    rpe_enabled: bool = True
    verb_head_enabled: bool = False
    max_seq_len: int = 20
    rpe_hidden: int = 16
    loss_pos_weight: float = 1.0

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {self.variant!r}")
        if self.variant != "vognet" and self.rpe_enabled:
            raise ConfigError(f"{self.variant} does not support relative position encoding")
        if self.d_fused % self.n_h:
            raise ConfigError(f"d_fused={self.d_fused} not divisible by n_h={self.n_h}")
        if self.d_fused % 2:
            raise ConfigError("d_fused must be even (visual/segment halves)")
        if self.variant == "vognet" and (self.d_fused + self.d_q) % self.n_h:
            raise ConfigError(
                f"d_fused+d_q={self.d_fused + self.d_q} not divisible by n_h={self.n_h}")
        if self.d_hidden % 2:
            raise ConfigError("d_hidden must be even (two directions)")

    @property
    def has_otx(self):
        return self.variant in ("vidgrnd", "vognet")

    @property
    def has_mtx(self):
        return self.variant == "vognet"


def desk_config(**overrides):
    cfg = ModelConfig(**overrides)
    cfg.validate()
    return cfg


def paper_config(**overrides):
    """Appendix-scale dimensions (not meant for desk-scale training)."""
    base = dict(d_word=512, d_hidden=1024, d_q=256, d_v=2048, d_s=3072,
                d_fused=1024, n_l=1, n_h=3, max_seq_len=20, rpe_hidden=64)
    base.update(overrides)
    cfg = ModelConfig(**base)
    # the published dims are not divisible by 3 heads; widen minimally,
    # keeping d_fused even for the visual/segment halves
    while cfg.d_fused % cfg.n_h or cfg.d_fused % 2:
        cfg.d_fused += 1
    if cfg.variant == "vognet" and (cfg.d_fused + cfg.d_q) % cfg.n_h:
        cfg.d_q += cfg.n_h - (cfg.d_fused + cfg.d_q) % cfg.n_h
    cfg.validate()
    return cfg


def build_vocab(corpus):
    words = sorted({w for q in corpus.queries for w in q.words})
    return [UNK] + words


# ---------------------------------------------------------------------------
# building blocks


class _Params:
    """Ordered registry of named parameters."""

    def __init__(self, rng):
        self.rng = rng
        self.by_name = {}

    def weight(self, name, shape):
        return self._register(ad.glorot_uniform(name, shape, self.rng))

    def zeros(self, name, shape):
        return self._register(Parameter(name, np.zeros(shape)))

    def ones(self, name, shape):
        return self._register(Parameter(name, np.ones(shape)))

    def _register(self, p):
        if p.name in self.by_name:
            raise ConfigError(f"duplicate parameter name {p.name}")
        self.by_name[p.name] = p
        return p

    def all(self):
        return [self.by_name[n] for n in sorted(self.by_name)]


class Linear:
    def __init__(self, params, name, d_in, d_out):
        self.w = params.weight(f"{name}.w", (d_in, d_out))
        self.b = params.zeros(f"{name}.b", (d_out,))

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)


class Mlp2:
    """Two-layer perceptron with tanh hidden activation."""

    def __init__(self, params, name, d_in, d_hidden, d_out):
        self.l1 = Linear(params, f"{name}.l1", d_in, d_hidden)
        self.l2 = Linear(params, f"{name}.l2", d_hidden, d_out)

    def __call__(self, x):
        return self.l2(ad.tanh(self.l1(x)))


class LstmCell:
    def __init__(self, params, name, d_in, d_hidden):
        self.d_hidden = d_hidden
        self.wx = params.weight(f"{name}.wx", (d_in, 4 * d_hidden))
        self.wh = params.weight(f"{name}.wh", (d_hidden, 4 * d_hidden))
        self.b = params.zeros(f"{name}.b", (4 * d_hidden,))

    def step(self, x, h, c):
        z = ad.add(ad.add(ad.matmul(x, self.wx), ad.matmul(h, self.wh)), self.b)
        d = self.d_hidden
        i = ad.sigmoid(z[:, 0:d])
        f = ad.sigmoid(z[:, d:2 * d])
        g = ad.tanh(z[:, 2 * d:3 * d])
        o = ad.sigmoid(z[:, 3 * d:4 * d])
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        return h_new, c_new


class TransformerLayer:
    """Post-norm encoder layer; optional per-head additive attention bias."""

    def __init__(self, params, name, d_model, n_h):
        if d_model % n_h:
            raise ConfigError(f"{name}: d_model={d_model} not divisible by {n_h} heads")
        self.d_model = d_model
        self.n_h = n_h
        self.d_head = d_model // n_h
        self.wq = params.weight(f"{name}.wq", (d_model, d_model))
        self.wk = params.weight(f"{name}.wk", (d_model, d_model))
        self.wv = params.weight(f"{name}.wv", (d_model, d_model))
        self.wo = params.weight(f"{name}.wo", (d_model, d_model))
        self.ln1_g = params.ones(f"{name}.ln1.g", (d_model,))
        self.ln1_b = params.zeros(f"{name}.ln1.b", (d_model,))
        self.ff1 = Linear(params, f"{name}.ff1", d_model, 4 * d_model)
        self.ff2 = Linear(params, f"{name}.ff2", 4 * d_model, d_model)
        self.ln2_g = params.ones(f"{name}.ln2.g", (d_model,))
        self.ln2_b = params.zeros(f"{name}.ln2.b", (d_model,))

    def __call__(self, x, delta=None):
        """x: (N, d_model); delta: optional (n_h, N, N) bias added to QK^T."""
        q = ad.matmul(x, self.wq)
        k = ad.matmul(x, self.wk)
        v = ad.matmul(x, self.wv)
        scale = 1.0 / np.sqrt(self.d_head)
        heads = []
        for h in range(self.n_h):
            cols = slice(h * self.d_head, (h + 1) * self.d_head)
            scores = ad.matmul(q[:, cols], ad.transpose(k[:, cols]))
            if delta is not None:
                scores = ad.add(scores, delta[h])
            attn = ad.softmax(ad.mul(scores, scale), axis=-1)
            heads.append(ad.matmul(attn, v[:, cols]))
        attended = ad.matmul(ad.concat(heads, axis=1), self.wo)
        x = ad.layer_norm(ad.add(x, attended), self.ln1_g, self.ln1_b)
        ff = self.ff2(ad.relu(self.ff1(x)))
        return ad.layer_norm(ad.add(x, ff), self.ln2_g, self.ln2_b)


@dataclass
class QueryEncoding:
    hidden: Tensor  # (n, d_hidden)
    role_embeddings: Tensor  # (k, d_q), one row per phrase
    role_spans: list
    groundable_mask: list
    verb_idx: int


@dataclass
class ScoreVolume:
    logits: object  # Tensor (k, F', P'); for SEP a list of such, one per block
    verb_logits: Tensor | None = None


# ---------------------------------------------------------------------------
# the model


class GroundingModel:
    def __init__(self, config, vocab, seed=0):
        config.validate()
        self.config = config
        self.vocab = list(vocab)
        self.word_to_id = {w: i for i, w in enumerate(self.vocab)}
        rng = np.random.default_rng(seed)
        params = _Params(rng)
        c = config
        hd = c.d_hidden // 2
        self.embed = params.weight("lang.embed", (len(self.vocab), c.d_word))
        self.lstm_fwd = LstmCell(params, "lang.lstm_fwd", c.d_word, hd)
        self.lstm_bwd = LstmCell(params, "lang.lstm_bwd", c.d_word, hd)
        self.m_q = Mlp2(params, "lang.m_q", 2 * c.d_hidden, c.d_q, c.d_q)
        self.m_v_obj = Linear(params, "vis.m_v_obj", c.d_v + D_POS_CODE, c.d_fused // 2)
        self.m_v_seg = Linear(params, "vis.m_v_seg", c.d_s, c.d_fused // 2)
        self.otx = []
        if c.has_otx:
            self.otx = [TransformerLayer(params, f"otx.layer{i}", c.d_fused, c.n_h)
                        for i in range(c.n_l)]
        self.m_p = None
        if c.rpe_enabled:
            self.m_p = Mlp2(params, "rpe.m_p", D_POS_CODE, c.rpe_hidden, c.n_h)
        self.mtx = []
        if c.has_mtx:
            self.mtx = [TransformerLayer(params, f"mtx.layer{i}", c.d_fused + c.d_q, c.n_h)
                        for i in range(c.n_l)]
        d_mm = c.d_fused + c.d_q
        self.scorer1 = Linear(params, "score.l1", d_mm, d_mm // 2)
        self.scorer2 = Linear(params, "score.l2", d_mm // 2, 1)
        self.verb_seg = self.verb_q = None
        if c.verb_head_enabled:
            self.verb_seg = Linear(params, "verb.seg", c.d_s, c.d_q)
            self.verb_q = Linear(params, "verb.q", c.d_q, c.d_q)
        self._params = params

    def parameters(self):
        return self._params.all()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def load_state(self, state):
        for p in self.parameters():
            if p.name not in state:
                raise ContractError(f"checkpoint missing parameter {p.name}")
            if state[p.name].shape != p.data.shape:
                raise ContractError(f"checkpoint shape mismatch for {p.name}")
            p.data[...] = state[p.name]

    # -- language -----------------------------------------------------------

    def encode_query(self, query):
        n = len(query.words)
        if n > self.config.max_seq_len:
            raise ContractError(f"query {query.id}: length {n} exceeds max_seq_len")
        ids = [self.word_to_id.get(w, 0) for w in query.words]
        x = ad.embedding_lookup(self.embed, ids)  # (n, d_word)
        hd = self.config.d_hidden // 2
        h = Tensor(np.zeros((1, hd)))
        cc = Tensor(np.zeros((1, hd)))
        fwd = []
        for t in range(n):
            h, cc = self.lstm_fwd.step(x[t:t + 1], h, cc)
            fwd.append(h)
        h = Tensor(np.zeros((1, hd)))
        cc = Tensor(np.zeros((1, hd)))
        bwd = [None] * n
        for t in reversed(range(n)):
            h, cc = self.lstm_bwd.step(x[t:t + 1], h, cc)
            bwd[t] = h
        hidden = ad.concat([ad.concat(fwd, axis=0), ad.concat(bwd, axis=0)], axis=1)

        role_rows = []
        spans = []
        mask = []
        verb_idx = 0
        for j, phrase in enumerate(query.phrases):
            s, e = phrase.span
            if not (0 <= s < e <= n):
                raise ContractError(f"query {query.id}: span {phrase.span} outside sequence")
            # single-word spans duplicate the first hidden state
            g = ad.concat([hidden[s:s + 1], hidden[e - 1:e]], axis=1)
            role_rows.append(self.m_q(g))
            spans.append((s, e))
            mask.append(phrase.groundable)
            if phrase.role == "V":
                verb_idx = j
        role_embeddings = ad.concat(role_rows, axis=0)
        return QueryEncoding(hidden=hidden, role_embeddings=role_embeddings,
                             role_spans=spans, groundable_mask=mask, verb_idx=verb_idx)

    # -- vision -------------------------------------------------------------

    def encode_visual(self, features, segment, positions):
        """features: (F, P, d_v), segment: (F, d_s), positions: (F*P, 5)
        -> (F*P, d_fused)."""
        F, P, d_v = features.shape
        if d_v != self.config.d_v or segment.shape[1] != self.config.d_s:
            raise ContractError(
                f"feature dims ({d_v},{segment.shape[1]}) disagree with config "
                f"({self.config.d_v},{self.config.d_s})")
        v = Tensor(np.concatenate(
            [features.reshape(F * P, d_v), position_code(positions)], axis=1))
        v_half = ad.relu(self.m_v_obj(v))
        s_half = ad.relu(self.m_v_seg(Tensor(segment)))
        frame_of = np.repeat(np.arange(F), P)
        return ad.concat([v_half, s_half[frame_of]], axis=1)

    # -- relative position encoding -----------------------------------------

    def rpe_delta(self, positions):
        """positions: (N, 5) array -> (n_h, N, N) bias tensor.

        The pairwise differences are expanded with the sinusoidal code before
        the MLP, so a bias peaked at one spatial offset is linearly reachable.
        Subtracting the zero-difference output keeps Delta exactly zero on the
        diagonal (and for any pair of identical positions).
        """
        if self.m_p is None:
            raise ContractError("rpe_delta on a model without position encoding")
        N = positions.shape[0]
        diff = positions[:, None, :] - positions[None, :, :]
        out = self.m_p(Tensor(position_code(diff.reshape(N * N, 5))))
        out = ad.sub(out, self.m_p(Tensor(position_code(np.zeros((1, 5))))))
        return ad.transpose(ad.reshape(out, (N, N, self.config.n_h)), (2, 0, 1))

    # -- forward ------------------------------------------------------------

    def forward(self, sample):
        qenc = self.encode_query(sample.query)
        if sample.strategy == "sep":
            block_logits = [self._forward_block(b, qenc) for b in sample.blocks]
            verb_logits = None
            if self.config.verb_head_enabled:
                verb_logits = self.verb_score(sample, qenc)
            return ScoreVolume(logits=block_logits, verb_logits=verb_logits), qenc
        return ScoreVolume(logits=self._forward_block(sample, qenc)), qenc

    def _forward_block(self, sample, qenc):
        """Returns logits (k, F', P') for one contiguous proposal block."""
        c = self.config
        F, P = sample.membership.shape
        N = F * P
        positions = sample.positions.reshape(N, 5)
        fused = self.encode_visual(sample.features, sample.segment, positions)
        if self.otx:
            delta = self.rpe_delta(positions) if c.rpe_enabled else None
            x = fused
            for layer in self.otx:
                x = layer(x, delta)
            vsa = x
        else:
            vsa = fused
        k = len(sample.query.phrases)
        ones_p = np.ones((P, 1))
        ones_n = np.ones((N, 1))
        if self.mtx:
            frame_logits = []
            for f in range(F):
                rows = vsa[f * P:(f + 1) * P]  # (P, d_fused)
                items = []
                for l in range(k):
                    q_l = ad.matmul(Tensor(ones_p), qenc.role_embeddings[l:l + 1])
                    items.append(ad.concat([rows, q_l], axis=1))
                xf = ad.concat(items, axis=0)  # (k*P, d_fused + d_q)
                delta_f = None
                if c.rpe_enabled:
                    # all k role copies share the frame's P positions, so the
                    # (kP)^2 bias is the P^2 bias tiled k times each way
                    base = self.rpe_delta(positions[f * P:(f + 1) * P])
                    rows = ad.concat([base] * k, axis=1)
                    delta_f = ad.concat([rows] * k, axis=2)
                for layer in self.mtx:
                    xf = layer(xf, delta_f)
                lg = self.scorer2(ad.relu(self.scorer1(xf)))  # (k*P, 1)
                frame_logits.append(ad.reshape(lg, (k, 1, P)))
            return ad.concat(frame_logits, axis=1)  # (k, F, P)
        rows = []
        for l in range(k):
            q_l = ad.matmul(Tensor(ones_n), qenc.role_embeddings[l:l + 1])
            rows.append(ad.concat([vsa, q_l], axis=1))
        stacked = ad.concat(rows, axis=0)  # (k*N, d_fused + d_q)
        lg = self.scorer2(ad.relu(self.scorer1(stacked)))
        return ad.reshape(lg, (k, F, P))

    # -- SEP verb head ------------------------------------------------------

    def verb_score(self, sample, qenc):
        if sample.strategy != "sep":
            raise ContractError("verb_score is defined for the SEP strategy only")
        if self.verb_seg is None:
            raise ContractError("verb head is disabled in this configuration")
        vq = self.verb_q(qenc.role_embeddings[qenc.verb_idx:qenc.verb_idx + 1])  # (1, d_q)
        logits = []
        for block in sample.blocks:
            seg_mean = Tensor(block.segment.mean(axis=0, keepdims=True))  # (1, d_s)
            sv = self.verb_seg(seg_mean)  # (1, d_q)
            logits.append(ad.tsum(ad.mul(sv, vq), axis=1))  # (1,)
        return ad.concat(logits, axis=0)  # (k,)

    # -- loss ---------------------------------------------------------------

    def loss(self, volume, sample):
        """Mean BCE over groundable roles; adds verb BCE for SEP when enabled."""
        roles = sample.gt_roles
        if not roles:
            raise SkipSample(f"query {sample.query.id} has no groundable role")
        if sample.strategy == "sep":
            pieces = []
            targets = []
            for block, lg in zip(sample.blocks, volume.logits):
                pieces.append(lg[roles])  # (L, F, P)
                targets.append(block.gt.transpose(0, 2, 1))
            logits_g = ad.concat(pieces, axis=1)
            gt = np.concatenate(targets, axis=1)
            total = ad.bce_with_logits(logits_g, gt,
                                       pos_weight=self.config.loss_pos_weight)
            if volume.verb_logits is not None:
                target = np.zeros(len(sample.blocks))
                target[sample.anchor_pos] = 1.0
                total = ad.add(total, ad.bce_with_logits(volume.verb_logits, target))
            return total
        logits_g = volume.logits[roles]  # (L, F, P)
        gt = sample.gt.transpose(0, 2, 1)
        return ad.bce_with_logits(logits_g, gt,
                                  pos_weight=self.config.loss_pos_weight)
