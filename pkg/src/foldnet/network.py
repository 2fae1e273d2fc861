"""Layered networks as explicit layer/weight-matrix collections.

A network is a list of layers indexed 0..D plus a list of weighted
connections between layer pairs.  Layer 0 is a single bias neuron,
layer 1 holds the inputs and layer D the outputs.  Connections may be
non-consecutive or reversed (recurrence, decoder feedback), and carry a
tag naming their role inside composite layers (GRU gates, attention
energy).

Networks are treated as immutable after construction or loading:
forward passes, decoding and ensemble prediction are pure and safe to
run concurrently on a shared network.  Training and shrinking operate
on private copies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

EOS = 0  # token 0 doubles as end-of-sequence and start-of-decoding symbol

KIND_BIAS = "Bias"
KIND_INPUT = "Input"
KIND_DENSE = "Dense"
KIND_GRU = "Gru"
KIND_ATTENTION = "AttentionScore"
KIND_OUTPUT = "Output"
KINDS = (KIND_BIAS, KIND_INPUT, KIND_DENSE, KIND_GRU, KIND_ATTENTION, KIND_OUTPUT)

ACT_LINEAR = "Linear"
ACT_TANH = "Tanh"
ACT_SIGMOID = "Sigmoid"
ACT_SOFTMAX = "Softmax"
ACTIVATIONS = (ACT_LINEAR, ACT_TANH, ACT_SIGMOID, ACT_SOFTMAX)

ARCH_FEEDFORWARD = "Feedforward"
ARCH_SEQ_CLASSIFIER = "SeqClassifier"
ARCH_ENCDEC = "EncDecAttention"
ARCHS = (ARCH_FEEDFORWARD, ARCH_SEQ_CLASSIFIER, ARCH_ENCDEC)

TAG_PLAIN = "plain"
TAG_STATE = "state"
TAG_UPDATE = "update_gate"
TAG_RESET = "reset_gate"
TAG_INIT = "init_state"
TAG_ENERGY = "energy"
GRU_TAGS = (TAG_STATE, TAG_UPDATE, TAG_RESET)
TAGS = (TAG_PLAIN,) + GRU_TAGS + (TAG_INIT, TAG_ENERGY)
# canonical ordering of connections inside stacked bundles and files
_TAG_RANK = {t: i for i, t in enumerate(TAGS)}


class ModelFormatError(ValueError):
    """Raised when a model file or network violates the format contract."""


@dataclass
class LayerSpec:
    id: int
    kind: str
    size: int
    activation: str | None = None


@dataclass
class Connection:
    src: int
    dst: int
    weights: np.ndarray
    tag: str = TAG_PLAIN

    def key(self) -> tuple[int, int, str]:
        return (self.src, self.dst, self.tag)


@dataclass
class Dataset:
    """Toy-task items: (token sequence or feature vector, target)."""

    items: list
    task_name: str
    vocab_size: int

    def __post_init__(self):
        if not self.items:
            raise ValueError("dataset must be nonempty")


@dataclass
class Network:
    layers: list[LayerSpec]
    connections: list[Connection]
    arch: str
    vocab_size: int | None = None

    # -- structure access ------------------------------------------------

    def layer(self, d: int) -> LayerSpec:
        return self.layers[d]

    @property
    def output_id(self) -> int:
        return self.layers[-1].id

    def conn(self, src: int, dst: int, tag: str = TAG_PLAIN) -> Connection:
        for c in self.connections:
            if c.src == src and c.dst == dst and c.tag == tag:
                return c
        raise KeyError(f"no connection {src}->{dst} tag={tag}")

    def maybe_conn(self, src: int, dst: int, tag: str = TAG_PLAIN) -> Connection | None:
        for c in self.connections:
            if c.src == src and c.dst == dst and c.tag == tag:
                return c
        return None

    def incoming(self, d: int) -> list[Connection]:
        cs = [c for c in self.connections if c.dst == d]
        cs.sort(key=lambda c: (c.src, _TAG_RANK[c.tag]))
        return cs

    def outgoing(self, d: int) -> list[Connection]:
        cs = [c for c in self.connections if c.src == d]
        cs.sort(key=lambda c: (c.dst, _TAG_RANK[c.tag]))
        return cs

    def copy(self) -> "Network":
        return Network(
            layers=[LayerSpec(l.id, l.kind, l.size, l.activation) for l in self.layers],
            connections=[Connection(c.src, c.dst, c.weights.copy(), c.tag) for c in self.connections],
            arch=self.arch,
            vocab_size=self.vocab_size,
        )

    def param_count(self) -> int:
        return int(sum(c.weights.size for c in self.connections))

    # -- validation ------------------------------------------------------

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ModelFormatError(f"unknown arch {self.arch!r}")
        if not self.layers:
            raise ModelFormatError("network has no layers")
        for d, spec in enumerate(self.layers):
            if spec.id != d:
                raise ModelFormatError(f"layer ids must be contiguous, found id {spec.id} at position {d}")
            if spec.kind not in KINDS:
                raise ModelFormatError(f"layer {d}: unknown kind {spec.kind!r}")
            if spec.size < 1:
                raise ModelFormatError(f"layer {d}: size must be >= 1")
            if spec.kind in (KIND_DENSE, KIND_OUTPUT):
                if spec.activation not in ACTIVATIONS:
                    raise ModelFormatError(f"layer {d}: {spec.kind} layer needs a valid activation")
            elif spec.activation is not None:
                raise ModelFormatError(f"layer {d}: {spec.kind} layer must not carry an activation")
        if self.layers[0].kind != KIND_BIAS:
            raise ModelFormatError("layer 0 must be the Bias layer")
        if self.layers[0].size != 1:
            raise ModelFormatError("Bias layer must have size 1")
        if len(self.layers) < 3:
            raise ModelFormatError("network needs at least bias, input and output layers")
        if self.layers[1].kind != KIND_INPUT:
            raise ModelFormatError("layer 1 must be the Input layer")
        if self.layers[-1].kind != KIND_OUTPUT:
            raise ModelFormatError(f"layer {self.output_id} must be the Output layer")

        D = self.output_id
        seen = set()
        for c in self.connections:
            if not (0 <= c.src <= D and 0 <= c.dst <= D):
                raise ModelFormatError(f"connection {c.src}→{c.dst}: endpoint out of range")
            if c.tag not in TAGS:
                raise ModelFormatError(f"connection {c.src}→{c.dst}: unknown tag {c.tag!r}")
            if c.key() in seen:
                raise ModelFormatError(f"duplicate connection {c.src}→{c.dst} tag={c.tag}")
            seen.add(c.key())
            rows, cols = self.layers[c.src].size, self.layers[c.dst].size
            if c.weights.shape != (rows, cols):
                raise ModelFormatError(
                    f"connection {c.src}→{c.dst}: expected {rows}×{cols}, "
                    f"found {c.weights.shape[0]}×{c.weights.shape[1]}"
                )
            if c.weights.size and not np.all(np.isfinite(c.weights)):
                raise ModelFormatError(f"connection {c.src}→{c.dst}: non-finite weights")
            if c.src == c.dst and self.layers[c.dst].kind != KIND_GRU:
                raise ModelFormatError(f"connection {c.src}→{c.dst}: self-connection only allowed on Gru layers")
            if self.layers[c.dst].kind == KIND_GRU and c.tag not in GRU_TAGS + (TAG_INIT,):
                raise ModelFormatError(f"connection {c.src}→{c.dst}: Gru targets need a gate or init tag")
            if c.tag == TAG_INIT and self.layers[c.dst].kind != KIND_GRU:
                raise ModelFormatError(f"connection {c.src}→{c.dst}: init_state connections must target a Gru layer")

        for spec in self.layers:
            if spec.kind in (KIND_BIAS, KIND_INPUT):
                continue
            if not any(c.dst == spec.id for c in self.connections):
                raise ModelFormatError(f"layer {spec.id} has no incoming connection")
            if spec.kind == KIND_GRU:
                for tag in GRU_TAGS:
                    if self.maybe_conn(spec.id, spec.id, tag) is None:
                        raise ModelFormatError(f"Gru layer {spec.id} missing recurrent {tag} connection")

        if self.arch in (ARCH_SEQ_CLASSIFIER, ARCH_ENCDEC):
            if not self.vocab_size or self.vocab_size < 2:
                raise ModelFormatError("sequence architectures need vocab_size >= 2")
            if self.layers[1].size != self.vocab_size:
                raise ModelFormatError("input layer size must equal vocab_size")
        if self.arch == ARCH_ENCDEC:
            atts = [l.id for l in self.layers if l.kind == KIND_ATTENTION]
            if len(atts) != 1:
                raise ModelFormatError(f"EncDecAttention needs exactly one AttentionScore layer, found {len(atts)}")
            energies = [c for c in self.connections if c.src == atts[0] and c.tag == TAG_ENERGY]
            if len(energies) != 1 or energies[0].dst != 0:
                raise ModelFormatError("AttentionScore layer needs exactly one energy readout into layer 0")
            inits = [c for c in self.connections if c.tag == TAG_INIT and c.src != 0]
            if len(inits) != 1:
                raise ModelFormatError("EncDecAttention needs exactly one init_state projection into the decoder GRU")
            if self.layers[-1].size != self.vocab_size:
                raise ModelFormatError("EncDecAttention output layer size must equal vocab_size")


def topology_diff(a: Network, b: Network) -> str | None:
    """First structural difference between two networks, or None if identical."""
    if a.arch != b.arch:
        return f"arch {a.arch} vs {b.arch}"
    if a.vocab_size != b.vocab_size:
        return f"vocab_size {a.vocab_size} vs {b.vocab_size}"
    if len(a.layers) != len(b.layers):
        return f"layer count {len(a.layers)} vs {len(b.layers)}"
    for la, lb in zip(a.layers, b.layers):
        if (la.kind, la.size, la.activation) != (lb.kind, lb.size, lb.activation):
            return (
                f"layer {la.id}: {la.kind}/{la.size}/{la.activation} vs {lb.kind}/{lb.size}/{lb.activation}"
            )
    keys_a = sorted(c.key() for c in a.connections)
    keys_b = sorted(c.key() for c in b.connections)
    for ka, kb in zip(keys_a, keys_b):
        if ka != kb:
            return f"connection {ka} vs {kb}"
    if len(keys_a) != len(keys_b):
        return f"connection count {len(keys_a)} vs {len(keys_b)}"
    return None


# -- elementwise math ----------------------------------------------------


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == ACT_LINEAR:
        return z
    if name == ACT_TANH:
        return np.tanh(z)
    if name == ACT_SIGMOID:
        return sigmoid(z)
    if name == ACT_SOFTMAX:
        return softmax(z)
    raise ValueError(f"unknown activation {name!r}")


def onehot(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    out = np.zeros(tokens.shape + (vocab_size,))
    np.put_along_axis(out, tokens[..., None], 1.0, axis=-1)
    return out


# -- GRU cells -----------------------------------------------------------


@dataclass
class GruCell:
    """Weight bundle of one GRU layer.

    ``wx_*`` vertically stacks the per-source input matrices in ascending
    source-layer order; the x vector passed to :func:`gru_step` must be
    the matching concatenation of source activities.
    """

    wx_state: np.ndarray
    wx_update: np.ndarray
    wx_reset: np.ndarray
    wh_state: np.ndarray
    wh_update: np.ndarray
    wh_reset: np.ndarray
    b_state: np.ndarray
    b_update: np.ndarray
    b_reset: np.ndarray
    input_srcs: list[int] = field(default_factory=list)

    @classmethod
    def from_network(cls, net: Network, d: int) -> "GruCell":
        if net.layer(d).kind != KIND_GRU:
            raise ValueError(f"layer {d} is not a Gru layer")
        parts = {}
        srcs = sorted({c.src for c in net.incoming(d) if c.tag in GRU_TAGS and c.src not in (0, d)})
        for tag, name in ((TAG_STATE, "state"), (TAG_UPDATE, "update"), (TAG_RESET, "reset")):
            stacked = [net.conn(s, d, tag).weights for s in srcs]
            parts["wx_" + name] = np.vstack(stacked) if stacked else np.zeros((0, net.layer(d).size))
            parts["wh_" + name] = net.conn(d, d, tag).weights
            bias = net.maybe_conn(0, d, tag)
            parts["b_" + name] = bias.weights[0] if bias is not None else np.zeros(net.layer(d).size)
        return cls(input_srcs=srcs, **parts)


def gru_step(cell: GruCell, h: np.ndarray, x: np.ndarray) -> np.ndarray:
    """One GRU update: h' = (1-z)*h + z*htilde.

    z = sigmoid(x Wxz + h Whz + bz), r = sigmoid(x Wxr + h Whr + br),
    htilde = tanh(x Wxh + (r*h) Whh + bh).  Works on single vectors or
    batches (leading batch dimension).
    """
    h = np.asarray(h, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    m = cell.wh_state.shape[0]
    if h.shape[-1] != m:
        raise ValueError(f"state has width {h.shape[-1]}, cell expects {m}")
    if x.shape[-1] != cell.wx_state.shape[0]:
        raise ValueError(f"input has width {x.shape[-1]}, cell expects {cell.wx_state.shape[0]}")
    z = sigmoid(x @ cell.wx_update + h @ cell.wh_update + cell.b_update)
    r = sigmoid(x @ cell.wx_reset + h @ cell.wh_reset + cell.b_reset)
    htilde = np.tanh(x @ cell.wx_state + (r * h) @ cell.wh_state + cell.b_state)
    return (1.0 - z) * h + z * htilde


# -- attention -----------------------------------------------------------


@dataclass
class AttentionParams:
    w_state: np.ndarray  # decoder state -> score layer
    w_annot: np.ndarray  # encoder annotation -> score layer
    bias: np.ndarray  # (score_size,)
    v: np.ndarray  # (score_size,) energy readout

    @classmethod
    def from_network(cls, net: Network, att: int, dec_gru: int, enc_gru: int) -> "AttentionParams":
        bias = net.maybe_conn(0, att)
        size = net.layer(att).size
        return cls(
            w_state=net.conn(dec_gru, att).weights,
            w_annot=net.conn(enc_gru, att).weights,
            bias=bias.weights[0] if bias is not None else np.zeros(size),
            v=net.conn(att, 0, TAG_ENERGY).weights[:, 0],
        )


def attention_weights(params: AttentionParams, state: np.ndarray, annotations: np.ndarray) -> np.ndarray:
    """Additive attention over T source positions; returns the softmaxed weights."""
    annotations = np.asarray(annotations, dtype=np.float64)
    if annotations.ndim != 2 or annotations.shape[0] < 1:
        raise ValueError("annotations must be a nonempty T×a matrix")
    scores = np.tanh(state @ params.w_state + annotations @ params.w_annot + params.bias)
    energies = scores @ params.v
    return softmax(energies, axis=0)


# -- role discovery ------------------------------------------------------


@dataclass
class EncDecRoles:
    enc_embed: int
    enc_gru: int
    feedback_embed: int
    attention: int
    dec_gru: int
    out_proj: int
    output: int

    def named(self) -> dict[str, int]:
        return {
            "enc_embed": self.enc_embed,
            "enc_gru": self.enc_gru,
            "feedback_embed": self.feedback_embed,
            "attention": self.attention,
            "dec_gru": self.dec_gru,
            "out_proj": self.out_proj,
        }


def encdec_roles(net: Network) -> EncDecRoles:
    """Identify the canonical encoder-decoder layers from kinds and wiring."""
    if net.arch != ARCH_ENCDEC:
        raise ValueError("role discovery requires an EncDecAttention network")
    D = net.output_id
    dense = [l.id for l in net.layers if l.kind == KIND_DENSE]
    grus = [l.id for l in net.layers if l.kind == KIND_GRU]
    att = next(l.id for l in net.layers if l.kind == KIND_ATTENTION)

    def pick(candidates, what):
        if len(candidates) != 1:
            raise ModelFormatError(f"cannot identify {what}: candidates {candidates}")
        return candidates[0]

    enc_embed = pick([d for d in dense if net.maybe_conn(1, d) is not None], "encoder embedding")
    feedback_embed = pick([d for d in dense if net.maybe_conn(D, d) is not None], "feedback embedding")
    out_proj = pick([d for d in dense if net.maybe_conn(d, D) is not None], "output projection")
    enc_gru = pick([g for g in grus if net.maybe_conn(enc_embed, g, TAG_STATE) is not None], "encoder GRU")
    dec_gru = pick([g for g in grus if net.maybe_conn(feedback_embed, g, TAG_STATE) is not None], "decoder GRU")
    return EncDecRoles(enc_embed, enc_gru, feedback_embed, att, dec_gru, out_proj, D)


def layer_names(net: Network) -> dict[str, int]:
    """Human-friendly layer names used by the CLI."""
    if net.arch == ARCH_ENCDEC:
        return encdec_roles(net).named()
    if net.arch == ARCH_SEQ_CLASSIFIER:
        return {"gru": next(l.id for l in net.layers if l.kind == KIND_GRU)}
    hidden = [l.id for l in net.layers if l.kind == KIND_DENSE]
    return {f"hidden{i + 1}": d for i, d in enumerate(hidden)}


# -- forward passes ------------------------------------------------------


def _check_tokens(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise ValueError(f"token id out of range for vocab_size={vocab_size}")
    return tokens


def _affine(net: Network, d: int, inputs: dict[int, np.ndarray]) -> np.ndarray:
    """Pre-activation of layer d given source activities (bias implicit)."""
    z = None
    for c in net.incoming(d):
        if c.src == 0:
            term = c.weights[0]
        else:
            term = inputs[c.src] @ c.weights
        z = term if z is None else z + term
    return z


def _embed(net: Network, d: int, tokens: np.ndarray) -> np.ndarray:
    """Activity of a token-fed Dense layer (row lookup plus optional bias)."""
    spec = net.layer(d)
    incoming = [c for c in net.incoming(d) if c.src != 0]
    z = incoming[0].weights[tokens]
    bias = [c for c in net.incoming(d) if c.src == 0]
    if bias:
        z = z + bias[0].weights[0]
    return apply_activation(spec.activation, z)


def _forward_feedforward(net: Network, x: np.ndarray, recorder=None):
    acts = {1: x}
    logits = None
    for spec in net.layers[2:]:
        z = _affine(net, spec.id, acts)
        a = apply_activation(spec.activation, z)
        acts[spec.id] = a
        if spec.kind == KIND_OUTPUT:
            logits = z
        elif recorder is not None:
            recorder(spec.id, a)
    return acts[net.output_id], logits


def _forward_classifier(net: Network, tokens: np.ndarray, recorder=None):
    tokens = _check_tokens(tokens, net.vocab_size)
    gru = next(l.id for l in net.layers if l.kind == KIND_GRU)
    cell = GruCell.from_network(net, gru)
    B, L = tokens.shape
    h = np.zeros((B, net.layer(gru).size))
    for t in range(L):
        h = gru_step(cell, h, onehot(tokens[:, t], net.vocab_size))
        if recorder is not None:
            recorder(gru, h)
    D = net.output_id
    z = _affine(net, D, {gru: h})
    return apply_activation(net.layer(D).activation, z), z


def _encode(net: Network, roles: EncDecRoles, src: np.ndarray, recorder=None):
    """Run the encoder; returns (annotations (S,B,H), initial decoder state).

    The decoder starts from tanh of a learned projection of the final
    encoder state (the init_state-tagged connections into the decoder
    GRU).
    """
    cell = GruCell.from_network(net, roles.enc_gru)
    B, S = src.shape
    h = np.zeros((B, net.layer(roles.enc_gru).size))
    annot = []
    for t in range(S):
        x = _embed(net, roles.enc_embed, src[:, t])
        if recorder is not None:
            recorder(roles.enc_embed, x)
        h = gru_step(cell, h, x)
        if recorder is not None:
            recorder(roles.enc_gru, h)
        annot.append(h)
    z = h @ net.conn(roles.enc_gru, roles.dec_gru, TAG_INIT).weights
    bias = net.maybe_conn(0, roles.dec_gru, TAG_INIT)
    if bias is not None:
        z = z + bias.weights[0]
    return np.stack(annot), np.tanh(z)


class _Decoder:
    """Stepwise decoder over a fixed encoded source batch."""

    def __init__(self, net: Network, roles: EncDecRoles, src: np.ndarray, recorder=None):
        self.net = net
        self.roles = roles
        self.recorder = recorder
        self.annot, self.state = _encode(net, roles, src, recorder)
        self.att = AttentionParams.from_network(net, roles.attention, roles.dec_gru, roles.enc_gru)
        # annotation projections into the score layer are step-independent
        self.q = self.annot @ self.att.w_annot
        self.cell = GruCell.from_network(net, roles.dec_gru)
        self.w_proj = net.conn(roles.dec_gru, roles.out_proj).weights
        self.proj_bias = net.maybe_conn(0, roles.out_proj)
        self.w_out = net.conn(roles.out_proj, net.output_id).weights
        self.out_bias = net.maybe_conn(0, net.output_id)

    def step(self, prev_tokens: np.ndarray):
        net, roles = self.net, self.roles
        fb = _embed(net, roles.feedback_embed, prev_tokens)
        scores = np.tanh(self.state @ self.att.w_state + self.q + self.att.bias)
        energies = scores @ self.att.v  # (S,B)
        alpha = softmax(energies, axis=0)
        ctx = np.einsum("sb,sbh->bh", alpha, self.annot)
        if self.recorder is not None:
            self.recorder(roles.feedback_embed, fb)
            self.recorder(roles.attention, scores.reshape(-1, scores.shape[-1]))
        # decoder GRU inputs follow the cell's stacked source order
        parts = {roles.enc_gru: ctx, roles.feedback_embed: fb}
        x = np.concatenate([parts[s] for s in self.cell.input_srcs], axis=-1)
        self.state = gru_step(self.cell, self.state, x)
        proj = self.state @ self.w_proj
        if self.proj_bias is not None:
            proj = proj + self.proj_bias.weights[0]
        proj = apply_activation(net.layer(roles.out_proj).activation, proj)
        if self.recorder is not None:
            self.recorder(roles.dec_gru, self.state)
            self.recorder(roles.out_proj, proj)
        logits = proj @ self.w_out
        if self.out_bias is not None:
            logits = logits + self.out_bias.weights[0]
        return softmax(logits), logits


def _forward_encdec(net: Network, src: np.ndarray, targets: np.ndarray, recorder=None):
    src = _check_tokens(src, net.vocab_size)
    targets = _check_tokens(targets, net.vocab_size)
    roles = encdec_roles(net)
    dec = _Decoder(net, roles, src, recorder)
    B, T = targets.shape
    probs, logits = [], []
    prev = np.full(B, EOS, dtype=np.int64)
    for i in range(T):
        p, z = dec.step(prev)
        probs.append(p)
        logits.append(z)
        prev = targets[:, i]
    return np.stack(probs), np.stack(logits)


def forward(net: Network, x, targets=None, recorder=None):
    """Deterministic forward pass; returns (probabilities, logits).

    Feedforward: x is a feature vector or (B, n) batch.  SeqClassifier:
    x is a token sequence or (B, L) batch.  EncDecAttention: x is the
    source sequence and ``targets`` the forced target path; the result
    holds one distribution per target step.
    """
    if net.arch == ARCH_FEEDFORWARD:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        probs, logits = _forward_feedforward(net, np.atleast_2d(x), recorder)
        return (probs[0], logits[0]) if squeeze else (probs, logits)
    if net.arch == ARCH_SEQ_CLASSIFIER:
        x = np.asarray(x, dtype=np.int64)
        squeeze = x.ndim == 1
        probs, logits = _forward_classifier(net, np.atleast_2d(x), recorder)
        return (probs[0], logits[0]) if squeeze else (probs, logits)
    if net.arch == ARCH_ENCDEC:
        if targets is None:
            raise ValueError("EncDecAttention forward needs a forced target path; use greedy_decode otherwise")
        x = np.asarray(x, dtype=np.int64)
        targets = np.asarray(targets, dtype=np.int64)
        squeeze = x.ndim == 1
        probs, logits = _forward_encdec(net, np.atleast_2d(x), np.atleast_2d(targets), recorder)
        return (probs[:, 0], logits[:, 0]) if squeeze else (probs, logits)
    raise ValueError(f"unknown arch {net.arch!r}")


def greedy_decode(net: Network, src, max_len: int, stop_on_eos: bool = True):
    """Greedy decoding; returns (tokens, per-step distributions).

    Emits the argmax token each step and stops after emitting EOS or
    after max_len steps.  EOS is not included in the returned tokens;
    its distribution row is.
    """
    src = _check_tokens(src, net.vocab_size)
    if src.ndim != 1 or src.size == 0:
        raise ValueError("src must be a nonempty token sequence")
    if max_len == 0:
        return [], np.zeros((0, net.vocab_size))
    roles = encdec_roles(net)
    dec = _Decoder(net, roles, src[None, :])
    tokens: list[int] = []
    dists = []
    prev = np.array([EOS])
    for _ in range(max_len):
        p, _ = dec.step(prev)
        dists.append(p[0])
        tok = int(np.argmax(p[0]))
        if stop_on_eos and tok == EOS:
            break
        tokens.append(tok)
        prev = np.array([tok])
    return tokens, np.stack(dists)


def ensemble_decode(nets: list[Network], src, max_len: int, stop_on_eos: bool = True):
    """Prediction-averaging ensemble decoding.

    Each member runs its own attention and recurrent state; the per-step
    probability vectors are arithmetically averaged, the argmax of the
    average is emitted, and every member's state advances with that
    consensus token.
    """
    if not nets:
        raise ValueError("ensemble needs at least one network")
    for k, other in enumerate(nets[1:], start=2):
        diff = topology_diff(nets[0], other)
        if diff is not None:
            raise ValueError(f"ensemble member {k} topology mismatch: {diff}")
    src = _check_tokens(src, nets[0].vocab_size)
    if src.ndim != 1 or src.size == 0:
        raise ValueError("src must be a nonempty token sequence")
    if max_len == 0:
        return [], np.zeros((0, nets[0].vocab_size))
    decs = [_Decoder(net, encdec_roles(net), src[None, :]) for net in nets]
    tokens: list[int] = []
    dists = []
    prev = np.array([EOS])
    for _ in range(max_len):
        avg = np.mean([dec.step(prev)[0][0] for dec in decs], axis=0)
        dists.append(avg)
        tok = int(np.argmax(avg))
        if stop_on_eos and tok == EOS:
            break
        tokens.append(tok)
        prev = np.array([tok])
    return tokens, np.stack(dists)


# -- persistence ---------------------------------------------------------


def _f17(x: float) -> str:
    # 17 significant digits round-trip any binary64 value exactly
    return format(float(x), ".17g")


def serialize_model(net: Network) -> str:
    net.validate()
    out = ["{", '  "format_version": 1,']
    out.append(f'  "arch": {json.dumps(net.arch)},')
    out.append(f'  "vocab_size": {json.dumps(net.vocab_size)},')
    layer_lines = []
    for l in net.layers:
        entry = {"id": l.id, "kind": l.kind, "size": l.size}
        if l.activation is not None:
            entry["activation"] = l.activation
        layer_lines.append("    " + json.dumps(entry))
    out.append('  "layers": [\n' + ",\n".join(layer_lines) + "\n  ],")
    conn_lines = []
    for c in sorted(net.connections, key=lambda c: (c.src, c.dst, _TAG_RANK[c.tag])):
        rows = ",".join("[" + ",".join(_f17(v) for v in row) + "]" for row in c.weights)
        conn_lines.append(
            f'    {{"from": {c.src}, "to": {c.dst}, "tag": {json.dumps(c.tag)}, "weights": [{rows}]}}'
        )
    out.append('  "connections": [\n' + ",\n".join(conn_lines) + "\n  ]")
    out.append("}")
    return "\n".join(out) + "\n"


def save_model(net: Network, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_model(net))


def _require(doc: dict, key: str, where: str = "model"):
    if key not in doc:
        raise ModelFormatError(f"{where}: missing field {key!r}")
    return doc[key]


def load_model(path) -> Network:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelFormatError("model file must contain a JSON object")
    version = _require(doc, "format_version")
    if version != 1:
        raise ModelFormatError(f"unsupported format_version {version!r}")
    arch = _require(doc, "arch")
    vocab = _require(doc, "vocab_size")
    layers = []
    for i, entry in enumerate(_require(doc, "layers")):
        if not isinstance(entry, dict):
            raise ModelFormatError(f"layer {i}: must be an object")
        layers.append(
            LayerSpec(
                id=_require(entry, "id", f"layer {i}"),
                kind=_require(entry, "kind", f"layer {i}"),
                size=_require(entry, "size", f"layer {i}"),
                activation=entry.get("activation"),
            )
        )
    connections = []
    for i, entry in enumerate(_require(doc, "connections")):
        if not isinstance(entry, dict):
            raise ModelFormatError(f"connection {i}: must be an object")
        where = f"connection {i}"
        raw = _require(entry, "weights", where)
        try:
            weights = np.asarray(raw, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ModelFormatError(f"{where}: weights are not numeric") from exc
        if weights.ndim != 2:
            raise ModelFormatError(f"{where}: weights must be a matrix (list of equal-length rows)")
        connections.append(
            Connection(
                src=_require(entry, "from", where),
                dst=_require(entry, "to", where),
                weights=weights,
                tag=entry.get("tag", TAG_PLAIN),
            )
        )
    net = Network(layers=layers, connections=connections, arch=arch, vocab_size=vocab)
    net.validate()
    return net


# -- builders ------------------------------------------------------------


def _init(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, cols))


def build_feedforward(
    layer_sizes: list[int],
    hidden_activation: str = ACT_TANH,
    output_activation: str = ACT_SOFTMAX,
    seed: int = 0,
    bias: bool = True,
) -> Network:
    """Fully-connected chain: layer_sizes = [n_in, hidden..., n_out]."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output sizes")
    rng = np.random.default_rng(seed)
    layers = [LayerSpec(0, KIND_BIAS, 1), LayerSpec(1, KIND_INPUT, layer_sizes[0])]
    conns = []
    for i, size in enumerate(layer_sizes[1:], start=2):
        is_out = i == len(layer_sizes)
        layers.append(
            LayerSpec(i, KIND_OUTPUT if is_out else KIND_DENSE, size,
                      output_activation if is_out else hidden_activation)
        )
        conns.append(Connection(i - 1, i, _init(rng, layer_sizes[i - 2], size)))
        if bias:
            conns.append(Connection(0, i, np.zeros((1, size))))
    net = Network(layers, conns, ARCH_FEEDFORWARD)
    net.validate()
    return net


def _gru_conns(rng, src: int, d: int, n_in: int, hidden: int) -> list[Connection]:
    conns = []
    for tag in GRU_TAGS:
        conns.append(Connection(src, d, _init(rng, n_in, hidden), tag))
        conns.append(Connection(d, d, _init(rng, hidden, hidden), tag))
        conns.append(Connection(0, d, np.zeros((1, hidden)), tag))
    return conns


def build_gru_classifier(vocab_size: int, hidden: int, n_classes: int, seed: int = 0) -> Network:
    rng = np.random.default_rng(seed)
    layers = [
        LayerSpec(0, KIND_BIAS, 1),
        LayerSpec(1, KIND_INPUT, vocab_size),
        LayerSpec(2, KIND_GRU, hidden),
        LayerSpec(3, KIND_OUTPUT, n_classes, ACT_SOFTMAX),
    ]
    conns = _gru_conns(rng, 1, 2, vocab_size, hidden)
    conns.append(Connection(2, 3, _init(rng, hidden, n_classes)))
    conns.append(Connection(0, 3, np.zeros((1, n_classes))))
    net = Network(layers, conns, ARCH_SEQ_CLASSIFIER, vocab_size=vocab_size)
    net.validate()
    return net


def build_encdec(vocab_size: int, embed: int, hidden: int, att: int, proj: int, seed: int = 0) -> Network:
    """Attention encoder-decoder over a shared source/target vocabulary.

    Layers: 2 encoder embedding, 3 encoder GRU, 4 feedback embedding
    (fed by the previous output token, hence the reversed connection
    from the output layer), 5 attention score layer with its scalar
    energy readout stored as the connection into layer 0, 6 decoder GRU
    (consuming context and feedback; its initial state is tanh of the
    init_state-tagged projection of the final encoder state), 7 linear
    output projection, 8 softmax output.
    """
    rng = np.random.default_rng(seed)
    layers = [
        LayerSpec(0, KIND_BIAS, 1),
        LayerSpec(1, KIND_INPUT, vocab_size),
        LayerSpec(2, KIND_DENSE, embed, ACT_LINEAR),
        LayerSpec(3, KIND_GRU, hidden),
        LayerSpec(4, KIND_DENSE, embed, ACT_LINEAR),
        LayerSpec(5, KIND_ATTENTION, att),
        LayerSpec(6, KIND_GRU, hidden),
        LayerSpec(7, KIND_DENSE, proj, ACT_LINEAR),
        LayerSpec(8, KIND_OUTPUT, vocab_size, ACT_SOFTMAX),
    ]
    conns = [Connection(1, 2, _init(rng, vocab_size, embed))]
    conns += _gru_conns(rng, 2, 3, embed, hidden)
    conns += [
        Connection(8, 4, _init(rng, vocab_size, embed)),
        Connection(6, 5, _init(rng, hidden, att)),
        Connection(3, 5, _init(rng, hidden, att)),
        Connection(0, 5, np.zeros((1, att))),
        Connection(5, 0, _init(rng, att, 1), TAG_ENERGY),
        Connection(3, 6, _init(rng, hidden, hidden), TAG_INIT),
        Connection(0, 6, np.zeros((1, hidden)), TAG_INIT),
    ]
    for tag in GRU_TAGS:
        conns.append(Connection(3, 6, _init(rng, hidden, hidden), tag))  # context
        conns.append(Connection(4, 6, _init(rng, embed, hidden), tag))  # feedback
        conns.append(Connection(6, 6, _init(rng, hidden, hidden), tag))
        conns.append(Connection(0, 6, np.zeros((1, hidden)), tag))
    conns += [
        Connection(6, 7, _init(rng, hidden, proj)),
        Connection(7, 8, _init(rng, proj, vocab_size)),
        Connection(0, 8, np.zeros((1, vocab_size))),
    ]
    net = Network(layers, conns, ARCH_ENCDEC, vocab_size=vocab_size)
    net.validate()
    return net
