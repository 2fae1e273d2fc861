"""Analytic cross-entropy gradients for all three architectures.

Backpropagation is written directly against the explicit connection
matrices; gradients come back as a dict keyed by (src, dst, tag), the
same keys the optimizer uses to address connections.  Losses are mean
negative log-likelihood per target element, so gradients of batches of
different sizes are comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import (
    ACT_LINEAR,
    ACT_SIGMOID,
    ACT_SOFTMAX,
    ACT_TANH,
    ARCH_ENCDEC,
    ARCH_FEEDFORWARD,
    ARCH_SEQ_CLASSIFIER,
    EOS,
    GruCell,
    KIND_GRU,
    KIND_OUTPUT,
    Network,
    TAG_ENERGY,
    TAG_INIT,
    TAG_PLAIN,
    TAG_RESET,
    TAG_STATE,
    TAG_UPDATE,
    encdec_roles,
    onehot,
    sigmoid,
    softmax,
)


class Grads(dict):
    def accumulate(self, key, value):
        if key in self:
            self[key] = self[key] + value
        else:
            self[key] = np.array(value, dtype=np.float64)


def _act_backward(name: str, a: np.ndarray, da: np.ndarray) -> np.ndarray:
    """Gradient through an elementwise activation given its output a."""
    if name == ACT_LINEAR:
        return da
    if name == ACT_TANH:
        return da * (1.0 - a * a)
    if name == ACT_SIGMOID:
        return da * a * (1.0 - a)
    raise ValueError(f"cannot backpropagate through activation {name!r}")


def _xent(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed NLL over the batch axis and the unscaled dlogits."""
    zmax = logits.max(axis=-1, keepdims=True)
    lse = zmax[..., 0] + np.log(np.sum(np.exp(logits - zmax), axis=-1))
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    nll = float(np.sum(lse - picked))
    dz = softmax(logits)
    np.put_along_axis(dz, targets[..., None], np.take_along_axis(dz, targets[..., None], axis=-1) - 1.0, axis=-1)
    return nll, dz


# -- GRU step forward/backward with caches ---------------------------------


@dataclass
class _GruStep:
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    hc: np.ndarray
    rh: np.ndarray


class _CellGrads:
    def __init__(self, cell: GruCell):
        self.wx = {t: np.zeros_like(m) for t, m in
                   ((TAG_STATE, cell.wx_state), (TAG_UPDATE, cell.wx_update), (TAG_RESET, cell.wx_reset))}
        self.wh = {t: np.zeros_like(m) for t, m in
                   ((TAG_STATE, cell.wh_state), (TAG_UPDATE, cell.wh_update), (TAG_RESET, cell.wh_reset))}
        self.b = {t: np.zeros_like(m) for t, m in
                  ((TAG_STATE, cell.b_state), (TAG_UPDATE, cell.b_update), (TAG_RESET, cell.b_reset))}

    def export(self, net: Network, d: int, cell: GruCell, grads: Grads) -> None:
        offset = 0
        for src in cell.input_srcs:
            width = net.conn(src, d, TAG_STATE).weights.shape[0]
            for tag in (TAG_STATE, TAG_UPDATE, TAG_RESET):
                grads.accumulate((src, d, tag), self.wx[tag][offset : offset + width])
            offset += width
        for tag in (TAG_STATE, TAG_UPDATE, TAG_RESET):
            grads.accumulate((d, d, tag), self.wh[tag])
            if net.maybe_conn(0, d, tag) is not None:
                grads.accumulate((0, d, tag), self.b[tag][None, :])


def _gru_forward(cell: GruCell, h: np.ndarray, x: np.ndarray, trail: list[_GruStep]) -> np.ndarray:
    z = sigmoid(x @ cell.wx_update + h @ cell.wh_update + cell.b_update)
    r = sigmoid(x @ cell.wx_reset + h @ cell.wh_reset + cell.b_reset)
    rh = r * h
    hc = np.tanh(x @ cell.wx_state + rh @ cell.wh_state + cell.b_state)
    trail.append(_GruStep(x=x, h_prev=h, z=z, r=r, hc=hc, rh=rh))
    return (1.0 - z) * h + z * hc


def _gru_backward(cell: GruCell, step: _GruStep, dh: np.ndarray, cg: _CellGrads):
    dz = dh * (step.hc - step.h_prev)
    dhc = dh * step.z
    dh_prev = dh * (1.0 - step.z)

    dpre_c = dhc * (1.0 - step.hc * step.hc)
    cg.wx[TAG_STATE] += step.x.T @ dpre_c
    cg.wh[TAG_STATE] += step.rh.T @ dpre_c
    cg.b[TAG_STATE] += dpre_c.sum(axis=0)
    drh = dpre_c @ cell.wh_state.T
    dr = drh * step.h_prev
    dh_prev = dh_prev + drh * step.r

    dpre_z = dz * step.z * (1.0 - step.z)
    cg.wx[TAG_UPDATE] += step.x.T @ dpre_z
    cg.wh[TAG_UPDATE] += step.h_prev.T @ dpre_z
    cg.b[TAG_UPDATE] += dpre_z.sum(axis=0)
    dh_prev = dh_prev + dpre_z @ cell.wh_update.T

    dpre_r = dr * step.r * (1.0 - step.r)
    cg.wx[TAG_RESET] += step.x.T @ dpre_r
    cg.wh[TAG_RESET] += step.h_prev.T @ dpre_r
    cg.b[TAG_RESET] += dpre_r.sum(axis=0)
    dh_prev = dh_prev + dpre_r @ cell.wh_reset.T

    dx = dpre_c @ cell.wx_state.T + dpre_z @ cell.wx_update.T + dpre_r @ cell.wx_reset.T
    return dh_prev, dx


# -- architectures ----------------------------------------------------------


def _ff_loss_grads(net: Network, x: np.ndarray, y: np.ndarray, recorder=None):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    B = x.shape[0]
    D = net.output_id
    if net.layer(D).activation != ACT_SOFTMAX:
        raise ValueError("training requires a Softmax output layer")
    acts = {1: x}
    pre = {}
    for spec in net.layers[2:]:
        z = None
        for c in net.incoming(spec.id):
            term = c.weights[0] if c.src == 0 else acts[c.src] @ c.weights
            z = term if z is None else z + term
        pre[spec.id] = z
        if spec.kind == KIND_OUTPUT:
            acts[spec.id] = z
        else:
            acts[spec.id] = {
                ACT_LINEAR: z,
                ACT_TANH: np.tanh(z),
                ACT_SIGMOID: sigmoid(z),
            }[spec.activation]
            if recorder is not None:
                recorder(spec.id, acts[spec.id])
    nll, dz_out = _xent(pre[D], y)
    loss = nll / B
    grads = Grads()
    dacts = {D: dz_out / B}
    for spec in reversed(net.layers[2:]):
        d = spec.id
        da = dacts.pop(d)
        dz = da if spec.kind == KIND_OUTPUT else _act_backward(spec.activation, acts[d], da)
        for c in net.incoming(d):
            if c.src == 0:
                grads.accumulate((0, d, c.tag), dz.sum(axis=0, keepdims=True))
            else:
                grads.accumulate(c.key(), acts[c.src].T @ dz)
                if c.src >= 2:
                    prev = dacts.get(c.src)
                    dacts[c.src] = dz @ c.weights.T if prev is None else prev + dz @ c.weights.T
    return loss, grads


def _classifier_loss_grads(net: Network, tokens: np.ndarray, y: np.ndarray, recorder=None):
    tokens = np.asarray(tokens, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    B, L = tokens.shape
    D = net.output_id
    gru = next(l.id for l in net.layers if l.kind == KIND_GRU)
    cell = GruCell.from_network(net, gru)
    h = np.zeros((B, net.layer(gru).size))
    trail: list[_GruStep] = []
    for t in range(L):
        h = _gru_forward(cell, h, onehot(tokens[:, t], net.vocab_size), trail)
        if recorder is not None:
            recorder(gru, h)
    w_out = net.conn(gru, D).weights
    logits = h @ w_out
    out_bias = net.maybe_conn(0, D)
    if out_bias is not None:
        logits = logits + out_bias.weights[0]
    nll, dz = _xent(logits, y)
    loss = nll / B
    dz = dz / B
    grads = Grads()
    grads.accumulate((gru, D, TAG_PLAIN), h.T @ dz)
    if out_bias is not None:
        grads.accumulate((0, D, TAG_PLAIN), dz.sum(axis=0, keepdims=True))
    dh = dz @ w_out.T
    cg = _CellGrads(cell)
    for t in range(L - 1, -1, -1):
        dh, _ = _gru_backward(cell, trail[t], dh, cg)
    cg.export(net, gru, cell, grads)
    return loss, grads


def _encdec_loss_grads(net: Network, src: np.ndarray, tgt: np.ndarray, recorder=None):
    src = np.asarray(src, dtype=np.int64)
    tgt = np.asarray(tgt, dtype=np.int64)
    B, S = src.shape
    T = tgt.shape[1]
    roles = encdec_roles(net)
    grads = Grads()

    # ---- encoder forward
    enc_cell = GruCell.from_network(net, roles.enc_gru)
    w_enc_embed = net.conn(1, roles.enc_embed).weights
    enc_embed_act = net.layer(roles.enc_embed).activation
    h = np.zeros((B, net.layer(roles.enc_gru).size))
    enc_trail: list[_GruStep] = []
    enc_embeds = []
    annot = []
    for t in range(S):
        e = w_enc_embed[src[:, t]]
        e = {ACT_LINEAR: e, ACT_TANH: np.tanh(e), ACT_SIGMOID: sigmoid(e)}[enc_embed_act]
        enc_embeds.append(e)
        if recorder is not None:
            recorder(roles.enc_embed, e)
        h = _gru_forward(enc_cell, h, e, enc_trail)
        if recorder is not None:
            recorder(roles.enc_gru, h)
        annot.append(h)
    annot = np.stack(annot)  # (S, B, H)
    h_final = h

    # ---- decoder initial state: tanh of the init projection
    w_init = net.conn(roles.enc_gru, roles.dec_gru, TAG_INIT).weights
    init_bias = net.maybe_conn(0, roles.dec_gru, TAG_INIT)
    z0 = h_final @ w_init
    if init_bias is not None:
        z0 = z0 + init_bias.weights[0]
    s = np.tanh(z0)
    s0 = s

    # ---- attention parameters
    w_att_state = net.conn(roles.dec_gru, roles.attention).weights
    w_att_annot = net.conn(roles.enc_gru, roles.attention).weights
    att_bias = net.maybe_conn(0, roles.attention)
    b_att = att_bias.weights[0] if att_bias is not None else 0.0
    v = net.conn(roles.attention, 0, TAG_ENERGY).weights[:, 0]
    q = annot @ w_att_annot  # (S, B, A)

    dec_cell = GruCell.from_network(net, roles.dec_gru)
    w_fb = net.conn(net.output_id, roles.feedback_embed).weights
    fb_act = net.layer(roles.feedback_embed).activation
    w_proj = net.conn(roles.dec_gru, roles.out_proj).weights
    proj_bias = net.maybe_conn(0, roles.out_proj)
    proj_act = net.layer(roles.out_proj).activation
    w_out = net.conn(roles.out_proj, net.output_id).weights
    out_bias = net.maybe_conn(0, net.output_id)

    # ---- decoder forward (teacher forced; prev token for step 0 is EOS)
    prev_tokens = np.concatenate([np.full((B, 1), EOS, dtype=np.int64), tgt[:, :-1]], axis=1)
    dec_trail: list[_GruStep] = []
    steps = []
    total_nll = 0.0
    dlogits_all = []
    states_prev = []
    states_post = []
    for i in range(T):
        prev = prev_tokens[:, i]
        fb = w_fb[prev]
        fb = {ACT_LINEAR: fb, ACT_TANH: np.tanh(fb), ACT_SIGMOID: sigmoid(fb)}[fb_act]
        u = np.tanh(s @ w_att_state + q + b_att)  # (S, B, A)
        energies = u @ v
        alpha = softmax(energies, axis=0)  # (S, B)
        ctx = np.einsum("sb,sbh->bh", alpha, annot)
        if recorder is not None:
            recorder(roles.feedback_embed, fb)
            recorder(roles.attention, u.reshape(-1, u.shape[-1]))
        parts = {roles.enc_gru: ctx, roles.feedback_embed: fb}
        x = np.concatenate([parts[k] for k in dec_cell.input_srcs], axis=-1)
        states_prev.append(s)
        s = _gru_forward(dec_cell, s, x, dec_trail)
        states_post.append(s)
        proj_pre = s @ w_proj
        if proj_bias is not None:
            proj_pre = proj_pre + proj_bias.weights[0]
        proj = {ACT_LINEAR: proj_pre, ACT_TANH: np.tanh(proj_pre), ACT_SIGMOID: sigmoid(proj_pre)}[proj_act]
        if recorder is not None:
            recorder(roles.dec_gru, s)
            recorder(roles.out_proj, proj)
        logits = proj @ w_out
        if out_bias is not None:
            logits = logits + out_bias.weights[0]
        nll, dz = _xent(logits, tgt[:, i])
        total_nll += nll
        dlogits_all.append(dz)
        steps.append((prev, fb, u, alpha, ctx, proj))

    n_elements = B * T
    loss = total_nll / n_elements

    # ---- decoder backward
    dec_cg = _CellGrads(dec_cell)
    g_w_out = np.zeros_like(w_out)
    g_out_bias = np.zeros((1, w_out.shape[1]))
    g_w_proj = np.zeros_like(w_proj)
    g_proj_bias = np.zeros((1, w_proj.shape[1]))
    g_w_fb = np.zeros_like(w_fb)
    g_w_att_state = np.zeros_like(w_att_state)
    g_w_att_annot = np.zeros_like(w_att_annot)
    g_b_att = np.zeros(w_att_state.shape[1])
    g_v = np.zeros_like(v)
    dannot = np.zeros_like(annot)
    dq = np.zeros_like(q)

    ds_running = np.zeros_like(s)
    for i in range(T - 1, -1, -1):
        prev, fb, u, alpha, ctx, proj = steps[i]
        s_prev = states_prev[i]
        s_i = states_post[i]
        dz = dlogits_all[i] / n_elements
        g_w_out += proj.T @ dz
        g_out_bias += dz.sum(axis=0, keepdims=True)
        dproj = dz @ w_out.T
        dproj_pre = _act_backward(proj_act, proj, dproj)
        g_w_proj += s_i.T @ dproj_pre
        g_proj_bias += dproj_pre.sum(axis=0, keepdims=True)
        ds = ds_running + dproj_pre @ w_proj.T

        dh_prev, dx = _gru_backward(dec_cell, dec_trail[i], ds, dec_cg)
        # split dx back into the stacked input sources
        offset = 0
        dparts = {}
        for k in dec_cell.input_srcs:
            width = ctx.shape[1] if k == roles.enc_gru else fb.shape[1]
            dparts[k] = dx[:, offset : offset + width]
            offset += width
        dctx = dparts[roles.enc_gru]
        dfb = dparts[roles.feedback_embed]

        dfb_pre = _act_backward(fb_act, fb, dfb)
        np.add.at(g_w_fb, prev, dfb_pre)

        dalpha = np.einsum("bh,sbh->sb", dctx, annot)
        dannot += alpha[:, :, None] * dctx[None, :, :]
        de = alpha * (dalpha - np.sum(alpha * dalpha, axis=0, keepdims=True))
        g_v += np.einsum("sba,sb->a", u, de)
        du_pre = (de[:, :, None] * v) * (1.0 - u * u)
        g_b_att += du_pre.sum(axis=(0, 1))
        du_sum = du_pre.sum(axis=0)
        g_w_att_state += s_prev.T @ du_sum
        dq += du_pre
        ds_running = dh_prev + du_sum @ w_att_state.T

    # annotation-side attention projections
    g_w_att_annot += np.einsum("sbh,sba->ha", annot, dq)
    dannot += dq @ w_att_annot.T

    # ---- decoder init backward
    ds0 = ds_running
    dz0 = ds0 * (1.0 - s0 * s0)
    g_w_init = h_final.T @ dz0
    dannot[-1] += dz0 @ w_init.T

    # ---- encoder backward
    enc_cg = _CellGrads(enc_cell)
    g_w_enc_embed = np.zeros_like(w_enc_embed)
    dh = np.zeros_like(h_final)
    for t in range(S - 1, -1, -1):
        dh = dh + dannot[t]
        dh, dx = _gru_backward(enc_cell, enc_trail[t], dh, enc_cg)
        dx_pre = _act_backward(enc_embed_act, enc_embeds[t], dx)
        np.add.at(g_w_enc_embed, src[:, t], dx_pre)

    # ---- export gradient dict
    dec_cg.export(net, roles.dec_gru, dec_cell, grads)
    enc_cg.export(net, roles.enc_gru, enc_cell, grads)
    grads.accumulate((1, roles.enc_embed, TAG_PLAIN), g_w_enc_embed)
    grads.accumulate((net.output_id, roles.feedback_embed, TAG_PLAIN), g_w_fb)
    grads.accumulate((roles.enc_gru, roles.dec_gru, TAG_INIT), g_w_init)
    if init_bias is not None:
        grads.accumulate((0, roles.dec_gru, TAG_INIT), dz0.sum(axis=0, keepdims=True))
    grads.accumulate((roles.dec_gru, roles.attention, TAG_PLAIN), g_w_att_state)
    grads.accumulate((roles.enc_gru, roles.attention, TAG_PLAIN), g_w_att_annot)
    if att_bias is not None:
        grads.accumulate((0, roles.attention, TAG_PLAIN), g_b_att[None, :])
    grads.accumulate((roles.attention, 0, TAG_ENERGY), g_v[:, None])
    grads.accumulate((roles.dec_gru, roles.out_proj, TAG_PLAIN), g_w_proj)
    if proj_bias is not None:
        grads.accumulate((0, roles.out_proj, TAG_PLAIN), g_proj_bias)
    grads.accumulate((roles.out_proj, net.output_id, TAG_PLAIN), g_w_out)
    if out_bias is not None:
        grads.accumulate((0, net.output_id, TAG_PLAIN), g_out_bias)
    return loss, grads


def loss_and_grads(net: Network, batch, recorder=None) -> tuple[float, Grads]:
    """Mean cross-entropy loss and its gradient for one batch.

    batch is (features, classes) for Feedforward, (token matrix,
    classes) for SeqClassifier and (source matrix, target matrix) for
    EncDecAttention; sequences within a batch share one length.
    """
    if net.arch == ARCH_FEEDFORWARD:
        return _ff_loss_grads(net, batch[0], batch[1], recorder)
    if net.arch == ARCH_SEQ_CLASSIFIER:
        return _classifier_loss_grads(net, batch[0], batch[1], recorder)
    if net.arch == ARCH_ENCDEC:
        return _encdec_loss_grads(net, batch[0], batch[1], recorder)
    raise ValueError(f"unknown arch {net.arch!r}")


def loss_only(net: Network, batch) -> float:
    """Loss via the plain forward pass (independent of the gradient path)."""
    from .network import forward

    if net.arch == ARCH_ENCDEC:
        probs, _ = forward(net, batch[0], targets=batch[1])
        picked = np.take_along_axis(probs, np.asarray(batch[1]).T[..., None], axis=-1)
        return float(-np.mean(np.log(picked)))
    probs, _ = forward(net, batch[0])
    picked = np.take_along_axis(probs, np.asarray(batch[1])[..., None], axis=-1)
    return float(-np.mean(np.log(picked)))
