"""Stack K topology-identical networks into one large network.

Inner layers (everything except bias, input and output) grow K-fold;
weight matrices combine according to where their endpoints live:
inner->inner becomes a block diagonal, inner->non-inner a vertical
stack scaled by 1/K, and non-inner->inner a horizontal concatenation.
Matrices joining two non-inner layers (e.g. the output bias row) are
averaged, the only choice consistent with averaged output activities.

The attention energy readout lives on a connection from the score layer
into layer 0, so the stacking rules automatically average the member
energies into a single softmax: the unfolded network synchronizes the
members' attention.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .network import Connection, LayerSpec, Network, topology_diff


class LayerRole(Enum):
    BIAS_OR_INPUT = "bias_or_input"
    INNER = "inner"
    OUTPUT = "output"


def layer_role(d: int, output_id: int) -> LayerRole:
    """Role of layer d in a network whose output layer is output_id."""
    if not 0 <= d <= output_id:
        raise ValueError(f"layer id {d} out of range [0, {output_id}]")
    if d in (0, 1):
        return LayerRole.BIAS_OR_INPUT
    if d == output_id:
        return LayerRole.OUTPUT
    return LayerRole.INNER


def _is_inner(d: int, output_id: int) -> bool:
    return layer_role(d, output_id) is LayerRole.INNER


def _block_diag(blocks: list[np.ndarray]) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r : r + b.shape[0], c : c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def unfold(nets: list[Network]) -> Network:
    """Combine K same-topology networks into one unfolded network.

    K = 1 returns a structurally identical copy, which makes unfolding a
    usable pipeline no-op.
    """
    if not nets:
        raise ValueError("unfold needs at least one network")
    base = nets[0]
    for k, other in enumerate(nets[1:], start=2):
        diff = topology_diff(base, other)
        if diff is not None:
            raise ValueError(f"member {k} topology mismatch: {diff}")
    K = len(nets)
    D = base.output_id
    layers = [
        LayerSpec(l.id, l.kind, l.size * K if _is_inner(l.id, D) else l.size, l.activation)
        for l in base.layers
    ]
    connections = []
    for c in base.connections:
        blocks = [net.conn(c.src, c.dst, c.tag).weights for net in nets]
        src_inner = _is_inner(c.src, D)
        dst_inner = _is_inner(c.dst, D)
        if src_inner and dst_inner:
            w = _block_diag(blocks)
        elif src_inner:
            w = np.vstack(blocks) / K
        elif dst_inner:
            w = np.hstack(blocks)
        else:
            w = np.mean(blocks, axis=0)
        connections.append(Connection(c.src, c.dst, w, c.tag))
    out = Network(layers, connections, base.arch, base.vocab_size)
    out.validate()
    return out


def size_factor(net: Network, reference: Network) -> float:
    """Total parameter count of net divided by the reference's."""
    ref = reference.param_count()
    if ref == 0:
        raise ValueError("reference network has no parameters")
    return net.param_count() / ref
