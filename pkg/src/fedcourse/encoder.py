"""Attention-based node encoder over the school's heterogeneous graph.

One transformer-style block: per-type embedding lookup, content fusion by
elementwise addition, multi-head neighbor attention with MLP compatibility
scores over (node, neighbor, edge) triples, output projection, then residual
+ layer norm, position-wise feed-forward, residual + layer norm.

Attention logits come from a two-layer perceptron on the concatenation of the
query-projected center, key-projected neighbor, and key-projected edge
vector.  Edge vectors: edges touching an activity use that activity node's
fused embedding; student-course edges use a learned per-edge-type vector.
Attention weights multiply the neighbors' value projections; weights for each
(node, head) are a softmax over the node's neighborhood, so they are
nonnegative and sum to one.  Isolated nodes get a zero attention output and
ride the residual path.

The backward pass is written by hand and validated against central finite
differences in the test suite.  Student embeddings enter as a separate table
so they can stay school-local; every other parameter is shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from fedcourse.datasets import Catalog
from fedcourse.errors import ConfigError, NumericsError
from fedcourse.hetgraph import EdgeType, HeteroGraph, NodeType
from fedcourse.textenc import TextEncoder, encode_texts

LN_EPS = 1e-5

_EDGE_TYPE_ROW = {
    EdgeType.STUDENT_COURSE: 0,
    EdgeType.STUDENT_ACTIVITY: 1,
    EdgeType.COURSE_ACTIVITY: 2,
}


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 100
    n_heads: int = 10
    ffn_dim: int | None = None
    dropout: float = 0.2
    raw_dim: int = 512

    def __post_init__(self) -> None:
        if self.dim < 2:
            raise ConfigError("dim must be at least 2")
        if self.n_heads < 1:
            raise ConfigError("n_heads must be positive")
        if self.dim % self.n_heads != 0:
            raise ConfigError(
                f"n_heads must divide dim: {self.n_heads} does not divide {self.dim}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.raw_dim < 1:
            raise ConfigError("raw_dim must be positive")
        if self.ffn_dim is not None and self.ffn_dim < 1:
            raise ConfigError("ffn_dim must be positive")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @property
    def ffn_width(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.dim


@dataclass
class EncoderParams:
    """All shared tensors of the encoder.

    Attention projections are stored head-stacked: (heads, dim, head_dim).
    ``content_w``/``content_b`` form the dimension-reduction dense layer
    applied to raw text features.
    """

    course_embed: np.ndarray
    activity_embed: np.ndarray
    edge_type_embed: np.ndarray
    attn_query: np.ndarray
    attn_key: np.ndarray
    attn_value: np.ndarray
    score_w1: np.ndarray
    score_b1: np.ndarray
    score_w2: np.ndarray
    attn_out: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    norm1_gain: np.ndarray
    norm1_bias: np.ndarray
    norm2_gain: np.ndarray
    norm2_bias: np.ndarray
    content_w: np.ndarray
    content_b: np.ndarray
    dropout: float = 0.0

    @property
    def dim(self) -> int:
        return self.attn_out.shape[0]

    @property
    def n_heads(self) -> int:
        return self.attn_query.shape[0]

    @property
    def head_dim(self) -> int:
        return self.attn_query.shape[2]


# Wire name -> attribute; order fixes the serialization manifest.
SHARED_TENSOR_FIELDS: tuple[tuple[str, str], ...] = (
    ("embed/course", "course_embed"),
    ("embed/activity", "activity_embed"),
    ("embed/edge_type", "edge_type_embed"),
    ("attn/query", "attn_query"),
    ("attn/key", "attn_key"),
    ("attn/value", "attn_value"),
    ("attn/score_w1", "score_w1"),
    ("attn/score_b1", "score_b1"),
    ("attn/score_w2", "score_w2"),
    ("attn/out", "attn_out"),
    ("ffn/w1", "ffn_w1"),
    ("ffn/b1", "ffn_b1"),
    ("ffn/w2", "ffn_w2"),
    ("ffn/b2", "ffn_b2"),
    ("norm1/gain", "norm1_gain"),
    ("norm1/bias", "norm1_bias"),
    ("norm2/gain", "norm2_gain"),
    ("norm2/bias", "norm2_bias"),
    ("content/w", "content_w"),
    ("content/b", "content_b"),
)

SHARED_MANIFEST: tuple[str, ...] = tuple(name for name, _ in SHARED_TENSOR_FIELDS)


def shared_tensors(params: EncoderParams) -> dict[str, np.ndarray]:
    """The shared parameter set as an ordered name -> array mapping."""
    return {name: getattr(params, attr) for name, attr in SHARED_TENSOR_FIELDS}


def with_shared_tensors(params: EncoderParams, tensors: dict[str, np.ndarray]) -> EncoderParams:
    """Copy of ``params`` with every manifest tensor replaced."""
    updates = {attr: np.array(tensors[name], dtype=np.float64) for name, attr in SHARED_TENSOR_FIELDS}
    return replace(params, **updates)


def zero_shared_grads(params: EncoderParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(getattr(params, attr)) for name, attr in SHARED_TENSOR_FIELDS}


def init_encoder_params(
    n_courses: int, n_activities: int, config: EncoderConfig, rng: np.random.Generator
) -> EncoderParams:
    """Draw fresh parameters; draw order is fixed by field declaration order."""
    d, h, dh, f = config.dim, config.n_heads, config.head_dim, config.ffn_width
    raw = config.raw_dim
    return EncoderParams(
        course_embed=rng.normal(0.0, 0.1, (n_courses, d)),
        activity_embed=rng.normal(0.0, 0.1, (n_activities, d)),
        edge_type_embed=rng.normal(0.0, 0.1, (3, d)),
        attn_query=rng.normal(0.0, 1.0 / np.sqrt(d), (h, d, dh)),
        attn_key=rng.normal(0.0, 1.0 / np.sqrt(d), (h, d, dh)),
        attn_value=rng.normal(0.0, 1.0 / np.sqrt(d), (h, d, dh)),
        score_w1=rng.normal(0.0, 1.0 / np.sqrt(3 * dh), (h, 3 * dh, dh)),
        score_b1=np.zeros((h, dh)),
        score_w2=rng.normal(0.0, 1.0 / np.sqrt(dh), (h, dh)),
        attn_out=rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
        ffn_w1=rng.normal(0.0, 1.0 / np.sqrt(d), (d, f)),
        ffn_b1=np.zeros(f),
        ffn_w2=rng.normal(0.0, 1.0 / np.sqrt(f), (f, d)),
        ffn_b2=np.zeros(d),
        norm1_gain=np.ones(d),
        norm1_bias=np.zeros(d),
        # Final-norm gain and bias at 1/sqrt(d) keep initial factor dot
        # products near the rating scale (dots of two outputs ~ d*(1/d) = 1)
        # instead of O(sqrt(d)) spread around zero; a zero-centered start
        # systematically underestimates ratio-valued ratings and the first
        # coherent gradient swamps the scale parameters.
        norm2_gain=np.full(d, 1.0 / np.sqrt(d)),
        norm2_bias=np.full(d, 1.0 / np.sqrt(d)),
        content_w=rng.normal(0.0, 1.0 / np.sqrt(raw), (d, raw)),
        content_b=np.zeros(d),
        dropout=config.dropout,
    )


def init_student_table(n_students: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, 0.1, (n_students, dim))


# --- content features ---------------------------------------------------------

@dataclass(frozen=True)
class ContentFeatures:
    """Raw hashed text features for the full catalog."""

    course_raw: np.ndarray
    activity_raw: np.ndarray


def build_content(catalog: Catalog, encoder: TextEncoder) -> ContentFeatures:
    return ContentFeatures(
        course_raw=encode_texts(encoder, catalog.course_texts),
        activity_raw=encode_texts(encoder, catalog.activity_texts),
    )


# --- graph tensorization -------------------------------------------------------

@dataclass(frozen=True)
class GraphTensors:
    """Index arrays derived from a graph, shared by forward and backward.

    Slots are directed (center, neighbor, edge) incidences sorted by center
    node; ``seg_starts[i]:seg_starts[i]+seg_lengths[i]`` covers the slots of
    ``seg_nodes[i]``.  Nodes without edges own no segment.
    """

    graph: HeteroGraph
    cat_idx: np.ndarray
    student_nodes: np.ndarray
    course_nodes: np.ndarray
    activity_nodes: np.ndarray
    local_activities: np.ndarray
    edge_vec_is_type: np.ndarray
    edge_vec_node: np.ndarray
    edge_vec_type_row: np.ndarray
    slot_center: np.ndarray
    slot_neighbor: np.ndarray
    slot_edge: np.ndarray
    seg_starts: np.ndarray
    seg_lengths: np.ndarray
    seg_nodes: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes

    @property
    def n_slots(self) -> int:
        return len(self.slot_center)


def build_graph_tensors(graph: HeteroGraph) -> GraphTensors:
    types = np.array([t.value for t in graph.node_types])
    cat_idx = np.array(graph.catalog_index, dtype=np.int64)
    student_nodes = np.flatnonzero(types == NodeType.STUDENT.value)
    course_nodes = np.flatnonzero(types == NodeType.COURSE.value)
    activity_nodes = np.flatnonzero(types == NodeType.ACTIVITY.value)
    local_activities = cat_idx[activity_nodes]

    n_edges = graph.n_edges
    edge_vec_is_type = np.zeros(n_edges, dtype=bool)
    edge_vec_node = np.zeros(n_edges, dtype=np.int64)
    edge_vec_type_row = np.zeros(n_edges, dtype=np.int64)
    for e, (src, dst, etype) in enumerate(graph.edges):
        edge_vec_type_row[e] = _EDGE_TYPE_ROW[etype]
        if etype is EdgeType.STUDENT_COURSE:
            edge_vec_is_type[e] = True
        else:
            # both remaining types have exactly one activity endpoint
            edge_vec_node[e] = dst if graph.node_types[dst] is NodeType.ACTIVITY else src

    centers: list[int] = []
    nbrs: list[int] = []
    eids: list[int] = []
    for v in range(graph.n_nodes):
        for nbr, eid in graph.adjacency[v]:
            centers.append(v)
            nbrs.append(nbr)
            eids.append(eid)
    slot_center = np.array(centers, dtype=np.int64)
    slot_neighbor = np.array(nbrs, dtype=np.int64)
    slot_edge = np.array(eids, dtype=np.int64)

    if len(slot_center):
        seg_nodes, seg_lengths = np.unique(slot_center, return_counts=True)
        seg_starts = np.concatenate(([0], np.cumsum(seg_lengths)[:-1]))
    else:
        seg_nodes = np.zeros(0, dtype=np.int64)
        seg_lengths = np.zeros(0, dtype=np.int64)
        seg_starts = np.zeros(0, dtype=np.int64)

    return GraphTensors(
        graph=graph,
        cat_idx=cat_idx,
        student_nodes=student_nodes,
        course_nodes=course_nodes,
        activity_nodes=activity_nodes,
        local_activities=local_activities,
        edge_vec_is_type=edge_vec_is_type,
        edge_vec_node=edge_vec_node,
        edge_vec_type_row=edge_vec_type_row,
        slot_center=slot_center,
        slot_neighbor=slot_neighbor,
        slot_edge=slot_edge,
        seg_starts=seg_starts,
        seg_lengths=seg_lengths,
        seg_nodes=seg_nodes,
    )


# --- primitive ops --------------------------------------------------------------

def fuse(content: np.ndarray | None, graph_emb: np.ndarray) -> np.ndarray:
    """Elementwise addition of content and graph embeddings.

    Student nodes carry no content, so their fused embedding is the graph
    embedding itself.
    """
    if content is None:
        return graph_emb
    if content.shape != graph_emb.shape:
        raise ValueError(f"content shape {content.shape} != graph shape {graph_emb.shape}")
    return content + graph_emb


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs at least 2 features")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + bias


def scaled_dot_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Classic softmax(Q Kᵀ / sqrt(d)) V."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("expected 2-D matrices")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ValueError("inner dimensions do not agree")
    logits = q @ k.T / np.sqrt(q.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ v


class HeadParams(NamedTuple):
    """One attention head's compatibility MLP (hidden bias, biasless output)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray


def head_params(params: EncoderParams, head: int) -> HeadParams:
    return HeadParams(params.score_w1[head], params.score_b1[head], params.score_w2[head])


def compat_score(head: HeadParams, e_i: np.ndarray, e_j: np.ndarray, e_edge: np.ndarray) -> float:
    """Attention logit for a (center, neighbor, edge) triple."""
    cat = np.concatenate([e_i, e_j, e_edge])
    hidden = np.maximum(cat @ head.w1 + head.b1, 0.0)
    return float(hidden @ head.w2)


@dataclass(frozen=True)
class HeadProjection:
    """Per-node projections of one head, plus key-projected edge vectors."""

    query: np.ndarray
    key: np.ndarray
    value: np.ndarray
    edge_key: np.ndarray


def attend_node(head: HeadParams, g: HeteroGraph, v: int, proj: HeadProjection) -> np.ndarray:
    """Attention output for one node under one head; isolated nodes get zeros."""
    nbrs = g.adjacency[v]
    if not nbrs:
        return np.zeros(proj.value.shape[1])
    scores = np.array(
        [compat_score(head, proj.query[v], proj.key[j], proj.edge_key[e]) for j, e in nbrs]
    )
    scores -= scores.max()
    weights = np.exp(scores)
    weights /= weights.sum()
    out = np.zeros(proj.value.shape[1])
    for w, (j, _e) in zip(weights, nbrs):
        out += w * proj.value[j]
    return out


# --- full forward/backward -------------------------------------------------------

@dataclass
class EncodeCache:
    """Everything the backward pass needs from a forward pass."""

    params: EncoderParams
    gt: GraphTensors
    content: ContentFeatures
    x: np.ndarray
    course_pre: np.ndarray
    act_pre: np.ndarray
    act_raw_local: np.ndarray
    z: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    zk: np.ndarray
    cat: np.ndarray
    pre1: np.ndarray
    hid: np.ndarray
    alpha: np.ndarray
    alpha_used: np.ndarray
    attn_mask: np.ndarray | None
    concat: np.ndarray
    ln1_xhat: np.ndarray
    ln1_istd: np.ndarray
    h1: np.ndarray
    ffn_pre: np.ndarray
    ffn_hid: np.ndarray
    ffn_mask: np.ndarray | None
    ln2_xhat: np.ndarray
    ln2_istd: np.ndarray
    keep: float


@dataclass
class NodeRepresentations:
    """Encoded node vectors with student/course projections and caches."""

    reps: np.ndarray
    student_reps: np.ndarray
    course_reps: np.ndarray
    attention: np.ndarray
    head_outputs: np.ndarray
    cache: EncodeCache = field(repr=False)

    @property
    def graph_tensors(self) -> GraphTensors:
        return self.cache.gt


def _ln_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered**2).mean(axis=1, keepdims=True)
    istd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = centered * istd
    return xhat * gain + bias, xhat, istd


def _ln_backward(dy: np.ndarray, xhat: np.ndarray, istd: np.ndarray, gain: np.ndarray):
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    gdy = dy * gain
    dx = istd * (
        gdy - gdy.mean(axis=1, keepdims=True) - xhat * (gdy * xhat).mean(axis=1, keepdims=True)
    )
    return dx, dgain, dbias


def _repeat_segments(per_segment: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    return np.repeat(per_segment, lengths, axis=1)


def encode(
    params: EncoderParams,
    g: HeteroGraph | GraphTensors,
    content: ContentFeatures,
    student_table: np.ndarray,
    *,
    dropout_rng: np.random.Generator | None = None,
) -> NodeRepresentations:
    """Run the full encoding block over every node of the graph.

    ``dropout_rng`` turns on (inverted) dropout for training; inference runs
    with dropout disabled and is deterministic.
    """
    gt = build_graph_tensors(g) if isinstance(g, HeteroGraph) else g
    graph = gt.graph
    d, heads, dh = params.dim, params.n_heads, params.head_dim
    n_nodes = graph.n_nodes
    training = dropout_rng is not None and params.dropout > 0.0
    keep = 1.0 - params.dropout

    if student_table.shape != (graph.n_students, d):
        raise ValueError(
            f"student table shape {student_table.shape} != ({graph.n_students}, {d})"
        )

    course_content, course_pre = _content_forward(params, content.course_raw)
    act_raw_local = content.activity_raw[gt.local_activities]
    act_content, act_pre = _content_forward(params, act_raw_local)

    x = np.zeros((n_nodes, d))
    x[gt.student_nodes] = student_table
    x[gt.course_nodes] = fuse(course_content, params.course_embed)
    if len(gt.activity_nodes):
        x[gt.activity_nodes] = fuse(act_content, params.activity_embed[gt.local_activities])

    n_edges = graph.n_edges
    z = np.zeros((n_edges, d))
    if n_edges:
        is_type = gt.edge_vec_is_type
        z[is_type] = params.edge_type_embed[gt.edge_vec_type_row[is_type]]
        z[~is_type] = x[gt.edge_vec_node[~is_type]]

    q = np.einsum("nd,hde->hne", x, params.attn_query)
    k = np.einsum("nd,hde->hne", x, params.attn_key)
    v = np.einsum("nd,hde->hne", x, params.attn_value)
    zk = np.einsum("ed,hdf->hef", z, params.attn_key)

    n_slots = gt.n_slots
    head_out = np.zeros((heads, n_nodes, dh))
    if n_slots:
        cat = np.concatenate(
            [q[:, gt.slot_center], k[:, gt.slot_neighbor], zk[:, gt.slot_edge]], axis=2
        )
        pre1 = np.einsum("hsc,hcm->hsm", cat, params.score_w1) + params.score_b1[:, None, :]
        hid = np.maximum(pre1, 0.0)
        scores = np.einsum("hsm,hm->hs", hid, params.score_w2)

        seg_max = np.maximum.reduceat(scores, gt.seg_starts, axis=1)
        ex = np.exp(scores - _repeat_segments(seg_max, gt.seg_lengths))
        seg_sum = np.add.reduceat(ex, gt.seg_starts, axis=1)
        alpha = ex / _repeat_segments(seg_sum, gt.seg_lengths)

        if training:
            attn_mask = dropout_rng.random((heads, n_slots)) >= params.dropout
            alpha_used = alpha * attn_mask / keep
        else:
            attn_mask = None
            alpha_used = alpha

        weighted = alpha_used[:, :, None] * v[:, gt.slot_neighbor]
        seg_out = np.add.reduceat(weighted, gt.seg_starts, axis=1)
        head_out[:, gt.seg_nodes] = seg_out
    else:
        cat = np.zeros((heads, 0, 3 * dh))
        pre1 = np.zeros((heads, 0, dh))
        hid = pre1
        alpha = np.zeros((heads, 0))
        alpha_used = alpha
        attn_mask = (
            dropout_rng.random((heads, 0)) >= params.dropout if training else None
        )

    concat = head_out.transpose(1, 0, 2).reshape(n_nodes, d)
    attn_proj = concat @ params.attn_out

    h1, ln1_xhat, ln1_istd = _ln_forward(x + attn_proj, params.norm1_gain, params.norm1_bias)

    ffn_pre = h1 @ params.ffn_w1 + params.ffn_b1
    ffn_hid = np.maximum(ffn_pre, 0.0)
    ffn_out = ffn_hid @ params.ffn_w2 + params.ffn_b2
    if training:
        ffn_mask = dropout_rng.random(ffn_out.shape) >= params.dropout
        ffn_used = ffn_out * ffn_mask / keep
    else:
        ffn_mask = None
        ffn_used = ffn_out

    out, ln2_xhat, ln2_istd = _ln_forward(h1 + ffn_used, params.norm2_gain, params.norm2_bias)

    if not np.isfinite(out).all():
        bad = int(np.flatnonzero(~np.isfinite(out).all(axis=1))[0])
        raise NumericsError(f"non-finite representation at node {bad}")

    cache = EncodeCache(
        params=params,
        gt=gt,
        content=content,
        x=x,
        course_pre=course_pre,
        act_pre=act_pre,
        act_raw_local=act_raw_local,
        z=z,
        q=q,
        k=k,
        v=v,
        zk=zk,
        cat=cat,
        pre1=pre1,
        hid=hid,
        alpha=alpha,
        alpha_used=alpha_used,
        attn_mask=attn_mask,
        concat=concat,
        ln1_xhat=ln1_xhat,
        ln1_istd=ln1_istd,
        h1=h1,
        ffn_pre=ffn_pre,
        ffn_hid=ffn_hid,
        ffn_mask=ffn_mask,
        ln2_xhat=ln2_xhat,
        ln2_istd=ln2_istd,
        keep=keep,
    )
    return NodeRepresentations(
        reps=out,
        student_reps=out[gt.student_nodes],
        course_reps=out[gt.course_nodes],
        attention=alpha,
        head_outputs=head_out,
        cache=cache,
    )


def _content_forward(params: EncoderParams, raw: np.ndarray):
    pre = raw @ params.content_w.T
    return np.maximum(pre, 0.0) + params.content_b, pre


@dataclass
class EncoderGrads:
    """Gradients for the shared manifest plus the local student table."""

    shared: dict[str, np.ndarray]
    student_table: np.ndarray


def node_grad_from_factors(
    reps: NodeRepresentations, d_students: np.ndarray, d_courses: np.ndarray
) -> np.ndarray:
    """Scatter per-student and per-course gradients into per-node layout."""
    gt = reps.cache.gt
    d_out = np.zeros_like(reps.reps)
    d_out[gt.student_nodes] = d_students
    d_out[gt.course_nodes] = d_courses
    return d_out


def encode_backward(cache: EncodeCache, d_out: np.ndarray) -> EncoderGrads:
    """Chain-rule gradients through the whole block; mirrors ``encode``."""
    params, gt = cache.params, cache.gt
    graph = gt.graph
    heads, dh = params.n_heads, params.head_dim
    n_nodes = graph.n_nodes
    training = cache.attn_mask is not None
    keep = cache.keep

    dsum2, dg2, db2 = _ln_backward(d_out, cache.ln2_xhat, cache.ln2_istd, params.norm2_gain)
    dh1 = dsum2.copy()
    dffn_out = dsum2 * cache.ffn_mask / keep if training else dsum2

    dffn_b2 = dffn_out.sum(axis=0)
    dffn_w2 = cache.ffn_hid.T @ dffn_out
    dffn_hid = dffn_out @ params.ffn_w2.T
    dffn_pre = dffn_hid * (cache.ffn_pre > 0)
    dffn_w1 = cache.h1.T @ dffn_pre
    dffn_b1 = dffn_pre.sum(axis=0)
    dh1 += dffn_pre @ params.ffn_w1.T

    dsum1, dg1, db1 = _ln_backward(dh1, cache.ln1_xhat, cache.ln1_istd, params.norm1_gain)
    dx = dsum1.copy()
    dattn_proj = dsum1

    d_attn_out = cache.concat.T @ dattn_proj
    dconcat = dattn_proj @ params.attn_out.T
    dhead_out = dconcat.reshape(n_nodes, heads, dh).transpose(1, 0, 2)

    dq = np.zeros_like(cache.q)
    dk = np.zeros_like(cache.k)
    dv = np.zeros_like(cache.v)
    dzk = np.zeros_like(cache.zk)
    d_score_w1 = np.zeros_like(params.score_w1)
    d_score_b1 = np.zeros_like(params.score_b1)
    d_score_w2 = np.zeros_like(params.score_w2)

    if gt.n_slots:
        dseg_out = dhead_out[:, gt.seg_nodes]
        dweighted = _repeat_segments(dseg_out, gt.seg_lengths)
        v_nbr = cache.v[:, gt.slot_neighbor]
        dalpha_used = np.einsum("hsd,hsd->hs", dweighted, v_nbr)
        contrib = cache.alpha_used[:, :, None] * dweighted
        for h in range(heads):
            np.add.at(dv[h], gt.slot_neighbor, contrib[h])

        dalpha = dalpha_used * cache.attn_mask / keep if training else dalpha_used
        inner = np.add.reduceat(cache.alpha * dalpha, gt.seg_starts, axis=1)
        dscores = cache.alpha * (dalpha - _repeat_segments(inner, gt.seg_lengths))

        d_score_w2 = np.einsum("hsm,hs->hm", cache.hid, dscores)
        dhid = dscores[:, :, None] * params.score_w2[:, None, :]
        dpre1 = dhid * (cache.pre1 > 0)
        d_score_w1 = np.einsum("hsc,hsm->hcm", cache.cat, dpre1)
        d_score_b1 = dpre1.sum(axis=1)
        dcat = np.einsum("hsm,hcm->hsc", dpre1, params.score_w1)

        for h in range(heads):
            np.add.at(dq[h], gt.slot_center, dcat[h, :, :dh])
            np.add.at(dk[h], gt.slot_neighbor, dcat[h, :, dh : 2 * dh])
            np.add.at(dzk[h], gt.slot_edge, dcat[h, :, 2 * dh :])

    d_attn_query = np.einsum("nd,hne->hde", cache.x, dq)
    d_attn_key = np.einsum("nd,hne->hde", cache.x, dk) + np.einsum("ed,hef->hdf", cache.z, dzk)
    d_attn_value = np.einsum("nd,hne->hde", cache.x, dv)
    dx += np.einsum("hne,hde->nd", dq, params.attn_query)
    dx += np.einsum("hne,hde->nd", dk, params.attn_key)
    dx += np.einsum("hne,hde->nd", dv, params.attn_value)

    d_edge_type = np.zeros_like(params.edge_type_embed)
    if graph.n_edges:
        dz = np.einsum("hef,hdf->ed", dzk, params.attn_key)
        is_type = gt.edge_vec_is_type
        np.add.at(d_edge_type, gt.edge_vec_type_row[is_type], dz[is_type])
        np.add.at(dx, gt.edge_vec_node[~is_type], dz[~is_type])

    d_student = dx[gt.student_nodes].copy()
    d_course_side = dx[gt.course_nodes]
    d_course_embed = d_course_side.copy()
    d_activity_embed = np.zeros_like(params.activity_embed)
    d_act_side = dx[gt.activity_nodes]
    if len(gt.activity_nodes):
        d_activity_embed[gt.local_activities] = d_act_side

    d_course_pre = d_course_side * (cache.course_pre > 0)
    d_content_w = d_course_pre.T @ cache.content.course_raw
    d_content_b = d_course_side.sum(axis=0)
    if len(gt.activity_nodes):
        d_act_pre = d_act_side * (cache.act_pre > 0)
        d_content_w += d_act_pre.T @ cache.act_raw_local
        d_content_b += d_act_side.sum(axis=0)

    shared = {
        "embed/course": d_course_embed,
        "embed/activity": d_activity_embed,
        "embed/edge_type": d_edge_type,
        "attn/query": d_attn_query,
        "attn/key": d_attn_key,
        "attn/value": d_attn_value,
        "attn/score_w1": d_score_w1,
        "attn/score_b1": d_score_b1,
        "attn/score_w2": d_score_w2,
        "attn/out": d_attn_out,
        "ffn/w1": dffn_w1,
        "ffn/b1": dffn_b1,
        "ffn/w2": dffn_w2,
        "ffn/b2": dffn_b2,
        "norm1/gain": dg1,
        "norm1/bias": db1,
        "norm2/gain": dg2,
        "norm2/bias": db2,
        "content/w": d_content_w,
        "content/b": d_content_b,
    }
    return EncoderGrads(shared=shared, student_table=d_student)
