"""The network: embedding, language-query fusion, spatial and temporal
relation reasoning, recursive adjacency refinement, and the summary head.

A video is a stack of per-frame object graphs plus one frame-level graph.
Object nodes within a frame are connected by a softmax affinity matrix and
aggregated with graph convolutions (the spatial side); pooled frame nodes
are connected by a second affinity matrix and propagated back onto object
nodes (the temporal side).  Both adjacency matrices are refined over
``refine_iters`` rounds by adding sigmoid cosine-affinity residuals, each
estimated from the other side's latest output.

Adjacency bookkeeping keeps two views: the *raw* accumulated matrix
(initial + sum of residuals, used for the telescoping identity) and the
*operational* matrix (clamped to 1e-6 and row-normalized) that the graph
convolutions and the entropy loss actually consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from videograph import engine
from videograph.engine import Parameter, Tensor
from videograph.errors import ConfigError, StateError

ADJ_FLOOR = 1e-6

QUERY_MODES = ("none", "word", "sentence")


@dataclass
class ModelConfig:
    """Structural hyperparameters; defaults follow the full-size setup."""

    frames: int = 320            # clip length T used by the trainer
    objects: int = 16            # detections kept per frame
    d_obj: int = 2048            # detector feature width
    d_embed: int = 1024          # object/query embedding width
    d_model: int = 512           # graph node width
    heads: int = 4               # attention heads per fusion block
    d_head: int = 256            # projected query/key/value width
    gcn_layers: int = 3          # graph convolutions per relation network
    refine_iters: int = 5        # adjacency refinement rounds K
    lambda_obj: float = 1.6      # spatial affinity softmax scale
    lambda_frame: float = 30.0   # temporal affinity softmax scale
    query_mode: str = "none"
    words: int = 8               # word-query slots W
    captions: int = 8            # sentence-query caption slots M
    d_word: int = 128
    d_caption: int = 2048
    use_positional_encoding: bool = True

    @property
    def d_half(self) -> int:
        return self.d_model // 2

    def validate(self):
        for name in (
            "frames", "objects", "d_obj", "d_embed", "d_model", "heads",
            "d_head", "gcn_layers", "words", "captions", "d_word", "d_caption",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.refine_iters < 0:
            raise ConfigError(f"refine_iters must be >= 0, got {self.refine_iters}")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 2 != 0:
            raise ConfigError(f"d_model {self.d_model} must be even")
        if self.lambda_obj <= 0 or self.lambda_frame <= 0:
            raise ConfigError("affinity scales must be > 0")
        if self.query_mode not in QUERY_MODES:
            raise ConfigError(f"query_mode {self.query_mode!r} not in {QUERY_MODES}")
        return self


def _xavier(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class AttentionBlock:
    """Single-query multi-head cross-attention with residual-broadcast fusion."""

    def __init__(self, store, prefix, rng, d_query, d_kv, d_out, heads, d_head):
        self.d_head = d_head
        self.heads = []
        for h in range(heads):
            wq = store.add(f"{prefix}.h{h}.wq", _xavier(rng, d_query, d_head))
            wk = store.add(f"{prefix}.h{h}.wk", _xavier(rng, d_kv, d_head))
            wv = store.add(f"{prefix}.h{h}.wv", _xavier(rng, d_kv, d_head))
            self.heads.append((wq, wk, wv))
        self.out_w = store.add(f"{prefix}.out_w", _xavier(rng, heads * d_head, d_out))
        self.norm_gain = store.add(f"{prefix}.norm_gain", np.ones((1, d_out)))
        self.norm_bias = store.add(f"{prefix}.norm_bias", np.zeros((1, d_out)))


class GraphConvLayer:
    """Graph convolution weight plus its node-norm scale/shift."""

    def __init__(self, store, prefix, rng, d_in, d_out, with_bias=False):
        self.w = store.add(f"{prefix}.w", _xavier(rng, d_in, d_out))
        self.b = store.add(f"{prefix}.b", np.zeros((1, d_out))) if with_bias else None
        self.gain = store.add(f"{prefix}.norm_gain", np.ones((1, d_out)))
        self.bias = store.add(f"{prefix}.norm_bias", np.zeros((1, d_out)))


class ModelParams:
    """Every learnable weight, keyed by a stable dotted name."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self._store: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        dh = cfg.d_half

        self.obj_w = self.add("embed.obj_w", _xavier(rng, cfg.d_obj, cfg.d_embed))
        self.obj_b = self.add("embed.obj_b", np.zeros((1, cfg.d_embed)))
        self.node_w = self.add("embed.node_w", _xavier(rng, cfg.d_embed, d))
        self.node_b = self.add("embed.node_b", np.zeros((1, d)))

        if cfg.query_mode == "none":
            self.query_null = self.add("query.null", _xavier(rng, 1, cfg.d_embed, (1, cfg.d_embed)))
        elif cfg.query_mode == "word":
            self.word_w = self.add("query.word_w", _xavier(rng, cfg.d_word, cfg.d_word))
            self.word_b = self.add("query.word_b", np.zeros((1, cfg.d_word)))
            flat = cfg.words * cfg.d_word
            self.query_proj_w = self.add("query.proj_w", _xavier(rng, flat, cfg.d_embed))
            self.query_proj_b = self.add("query.proj_b", np.zeros((1, cfg.d_embed)))
        else:
            flat = cfg.captions * cfg.d_caption
            self.query_proj_w = self.add("query.proj_w", _xavier(rng, flat, cfg.d_embed))
            self.query_proj_b = self.add("query.proj_b", np.zeros((1, cfg.d_embed)))

        self.spatial_attn = AttentionBlock(
            self, "spatial.attn", rng, cfg.d_embed, d, d, cfg.heads, cfg.d_head
        )
        self.spatial_convs = [
            GraphConvLayer(self, f"spatial.conv{i}", rng, din, dout)
            for i, (din, dout) in enumerate(spatial_channel_plan(cfg))
        ]
        self.temporal_attn = AttentionBlock(
            self, "temporal.attn", rng, cfg.d_embed, dh, dh, cfg.heads, cfg.d_head
        )
        self.temporal_convs = [
            GraphConvLayer(self, f"temporal.conv{i}", rng, din, dout, with_bias=True)
            for i, (din, dout) in enumerate(temporal_channel_plan(cfg))
        ]

        self.temporal_res_theta = self.add("refine.temporal.theta", _xavier(rng, dh, dh))
        self.temporal_res_phi = self.add("refine.temporal.phi", _xavier(rng, dh, dh))
        self.spatial_res_theta = self.add("refine.spatial.theta", _xavier(rng, d, d))
        self.spatial_res_phi = self.add("refine.spatial.phi", _xavier(rng, d, d))

        self.sum1 = GraphConvLayer(self, "summary.conv0", rng, d, dh)
        self.sum2 = GraphConvLayer(self, "summary.conv1", rng, dh, 2)

        self.recon_dec = GraphConvLayer(self, "recon.dec", rng, d, cfg.d_obj)
        self.recon_out_w = self.add("recon.out_w", _xavier(rng, 2 * cfg.d_obj, cfg.d_obj))
        self.recon_out_b = self.add("recon.out_b", np.zeros((1, cfg.d_obj)))

    def add(self, name: str, value) -> Parameter:
        if name in self._store:
            raise ConfigError(f"duplicate parameter {name}")
        p = Parameter(np.asarray(value, dtype=np.float64), name)
        self._store[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._store[name]

    def names(self):
        return list(self._store)

    def parameters(self):
        return list(self._store.values())

    def zero_grads(self):
        for p in self._store.values():
            p.zero_grad()

    def count(self) -> int:
        return sum(p.value.data.size for p in self._store.values())


def spatial_channel_plan(cfg: ModelConfig):
    d, dh = cfg.d_model, cfg.d_half
    return [(d, dh)] + [(dh, dh)] * (cfg.gcn_layers - 1)


def temporal_channel_plan(cfg: ModelConfig):
    d, dh = cfg.d_model, cfg.d_half
    return [(dh, dh)] * (cfg.gcn_layers - 1) + [(dh, d)]


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Fixed sinusoidal encoding over frame index, shape (n, d)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    idx = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe


def _node_axis(t: Tensor):
    """Normalization axes: every node in the clip counts as one sample.

    Statistics over all frames' nodes keep frame-to-frame differences
    intact (per-frame statistics would subtract each frame's mean, erasing
    exactly the signal the summarizer needs)."""
    return (0, 1) if t.ndim == 3 else 0


def embed_objects(raw, params: ModelParams) -> Tensor:
    """Project detector features into graph-node space: two linear layers."""
    x = raw if isinstance(raw, Tensor) else Tensor(np.asarray(raw, dtype=np.float64))
    if x.shape[-1] != params.cfg.d_obj:
        raise engine.DimensionError(
            f"object features have width {x.shape[-1]}, expected {params.cfg.d_obj}"
        )
    h = engine.linear(x, params.obj_w, params.obj_b)
    return engine.linear(h, params.node_w, params.node_b)


def fuse_query(params: ModelParams, vectors: np.ndarray | None) -> Tensor:
    """Produce the 1 x d_embed query representation for the configured mode."""
    cfg = params.cfg
    if cfg.query_mode == "none":
        return params.query_null.value
    if vectors is None:
        raise ConfigError(f"query_mode {cfg.query_mode!r} needs query vectors")
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ConfigError(f"query vectors must be a matrix, got shape {vectors.shape}")
    if cfg.query_mode == "word":
        slots, width = cfg.words, cfg.d_word
    else:
        slots, width = cfg.captions, cfg.d_caption
    if vectors.shape[1] != width:
        raise ConfigError(f"query vector width {vectors.shape[1]} != configured {width}")
    padded = np.zeros((slots, width))
    padded[: min(slots, vectors.shape[0])] = vectors[:slots]
    x = Tensor(padded)
    if cfg.query_mode == "word":
        x = engine.elu(engine.linear(x, params.word_w, params.word_b))
    flat = engine.reshape(x, (1, slots * width))
    return engine.linear(flat, params.query_proj_w, params.query_proj_b)


def mhca_fuse(query: Tensor, nodes: Tensor, block: AttentionBlock, kv_offset=None) -> Tensor:
    """Fuse a single query vector into every node.

    Per head the query attends over the nodes (keys/values, optionally
    offset by a positional encoding) and yields one context vector; head
    contexts are concatenated, projected, broadcast-added back onto the
    nodes, and node-normalized.  Works on (n, d) or stacked (T, n, d).
    """
    kv = engine.add(nodes, Tensor(kv_offset)) if kv_offset is not None else nodes
    scale = 1.0 / np.sqrt(block.d_head)
    contexts = []
    for wq, wk, wv in block.heads:
        qh = engine.matmul(query, wq.value)                      # (1, dh)
        kh = engine.matmul(kv, wk.value)                         # (..., n, dh)
        vh = engine.matmul(kv, wv.value)
        logits = engine.transpose(engine.matmul(kh, engine.transpose(qh)))  # (..., 1, n)
        att = engine.row_softmax(logits, scale)
        contexts.append(engine.matmul(att, vh))                  # (..., 1, dh)
    ctx = engine.concat(contexts, axis=-1)
    projected = engine.matmul(ctx, block.out_w.value)            # (..., 1, d_out)
    fused = engine.add(nodes, projected)
    return engine.node_norm(fused, block.norm_gain.value, block.norm_bias.value, axis=_node_axis(fused))


def build_spatial_graph(nodes: Tensor, lambda_obj: float) -> Tensor:
    """Row-softmax affinity over node inner products (per frame when stacked)."""
    gram = engine.matmul(nodes, engine.transpose(nodes))
    return engine.row_softmax(gram, lambda_obj)


def srr_forward(objects: Tensor, adjacency: Tensor, params: ModelParams) -> Tensor:
    """Spatial relation reasoning: the configured stack of graph convolutions."""
    h = objects
    for layer in params.spatial_convs:
        h = engine.graph_conv(h, adjacency, layer.w, activation="identity")
        h = engine.node_norm(h, layer.gain.value, layer.bias.value, axis=_node_axis(h))
        h = engine.elu(h)
    return h


def frame_pool(z: Tensor) -> Tensor:
    """Mean over object nodes: (n, d) -> (1, d) or (T, n, d) -> (T, d)."""
    pooled = engine.mean_axis(z, z.ndim - 2)
    if z.ndim == 3:
        return engine.reshape(pooled, (z.shape[0], z.shape[2]))
    return pooled


def build_temporal_graph(frames: Tensor, query: Tensor, params: ModelParams, lambda_frame: float, pe=None):
    """Language-guided frame nodes plus their row-stochastic affinity matrix."""
    f_hat = mhca_fuse(query, frames, params.temporal_attn, kv_offset=pe)
    adjacency = engine.row_softmax(
        engine.matmul(f_hat, engine.transpose(f_hat)), lambda_frame
    )
    return f_hat, adjacency


def trr_forward(z: Tensor, adjacency: Tensor, frame_nodes: Tensor, params: ModelParams) -> Tensor:
    """Temporal relation reasoning: propagate frame context onto object nodes.

    Every object in frame t receives the adjacency-weighted sum of the
    language-guided frame nodes; each layer applies W(z + message) + b with
    node-norm over all objects in the clip, then ELU.
    """
    if z.ndim != 3:
        raise engine.DimensionError(f"trr_forward expects (T, n, d), got {z.shape}")
    t = z.shape[0]
    message = engine.reshape(engine.matmul(adjacency, frame_nodes), (t, 1, z.shape[2]))
    h = z
    for layer in params.temporal_convs:
        h = engine.linear(engine.add(h, message), layer.w, layer.b)
        h = engine.node_norm(h, layer.gain.value, layer.bias.value, axis=(0, 1))
        h = engine.elu(h)
    return h


@dataclass
class RefinementState:
    """Raw accumulated adjacencies and their per-iteration residuals."""

    spatial_raw: Tensor
    temporal_raw: Tensor | None
    spatial_initial: np.ndarray
    temporal_initial: np.ndarray | None
    spatial_residuals: list = field(default_factory=list)
    temporal_residuals: list = field(default_factory=list)
    iteration: int = 0
    max_iterations: int = 0


def refine_step(state: RefinementState, frame_reps: Tensor, trr_objects: Tensor, params: ModelParams):
    """Accumulate one sigmoid cosine-affinity residual into each raw matrix.

    The temporal residual comes from the current pooled frame nodes; the
    spatial residual comes from the previous temporal-reasoning output.
    """
    if state.iteration >= state.max_iterations:
        raise StateError(
            f"refine_step called at iteration {state.iteration} with max {state.max_iterations}"
        )
    d_temporal = engine.sigmoid(
        cosine_residual(frame_reps, params.temporal_res_theta, params.temporal_res_phi)
    )
    state.temporal_raw = engine.add(state.temporal_raw, d_temporal)
    d_spatial = engine.sigmoid(
        cosine_residual(trr_objects, params.spatial_res_theta, params.spatial_res_phi)
    )
    state.spatial_raw = engine.add(state.spatial_raw, d_spatial)
    state.temporal_residuals.append(d_temporal.data.copy())
    state.spatial_residuals.append(d_spatial.data.copy())
    state.iteration += 1
    return state


def cosine_residual(x: Tensor, theta: Parameter, phi: Parameter) -> Tensor:
    return engine.cosine_affinity(x, theta, phi)


@dataclass
class SummaryScores:
    """Per-frame (background, keyframe) probabilities and the argmax set."""

    probs: np.ndarray           # (T, 2), rows sum to one; padded rows are (1, 0)
    keyframe_set: list[int]


def summarize_head(frame_reps: Tensor, adjacency: Tensor, params: ModelParams):
    h = engine.graph_conv(frame_reps, adjacency, params.sum1.w, activation="identity")
    h = engine.node_norm(h, params.sum1.gain.value, params.sum1.bias.value, axis=0)
    h = engine.relu(h)
    h = engine.graph_conv(h, adjacency, params.sum2.w, activation="identity")
    h = engine.node_norm(h, params.sum2.gain.value, params.sum2.bias.value, axis=0)
    probs = engine.row_softmax(h, 1.0)
    keyframes = [int(t) for t in np.nonzero(probs.data[:, 1] > probs.data[:, 0])[0]]
    return probs, keyframes


@dataclass
class ForwardDiagnostics:
    """Tape-connected tensors and per-pass snapshots for losses and tests."""

    probs: Tensor                       # (Tv, 2)
    spatial_op: Tensor                  # final operational (Tv, N, N)
    temporal_op: Tensor                 # final operational (Tv, Tv)
    frame_reps: Tensor                  # final pooled frame nodes (Tv, d_model)
    query: Tensor
    spatial_op_history: list            # np arrays, one per relation pass + final
    temporal_op_history: list
    n_valid: int = 0


@dataclass
class ForwardResult:
    scores: SummaryScores
    state: RefinementState
    diag: ForwardDiagnostics


def forward(objects, params: ModelParams, query_vectors=None, n_valid=None) -> ForwardResult:
    """Run the full pipeline on one clip.

    ``objects`` is (T, N, d_obj); ``n_valid`` marks how many leading frames
    are real.  Padded suffix frames are excluded from every computation and
    reported with background probability one, so appending padding never
    changes any score or loss.
    """
    cfg = params.cfg
    objects = np.asarray(objects, dtype=np.float64)
    if objects.ndim != 3:
        raise engine.DimensionError(f"objects must be (T, N, d_obj), got {objects.shape}")
    t_all = objects.shape[0]
    tv = t_all if n_valid is None else int(n_valid)
    if not (1 <= tv <= t_all):
        raise ConfigError(f"n_valid {tv} outside [1, {t_all}]")
    if objects.shape[2] != cfg.d_obj:
        raise engine.DimensionError(
            f"object feature width {objects.shape[2]} != configured d_obj {cfg.d_obj}"
        )

    query = fuse_query(params, query_vectors)
    nodes = mhca_fuse(query, embed_objects(objects[:tv], params), params.spatial_attn)
    spatial_raw = build_spatial_graph(nodes, cfg.lambda_obj)
    state = RefinementState(
        spatial_raw=spatial_raw,
        temporal_raw=None,
        spatial_initial=spatial_raw.data.copy(),
        temporal_initial=None,
        max_iterations=cfg.refine_iters,
    )

    pe = positional_encoding(tv, cfg.d_half) if cfg.use_positional_encoding else None
    spatial_hist, temporal_hist = [], []
    obj_in = nodes
    trr_out = None
    for k in range(cfg.refine_iters + 1):
        spatial_op = engine.clamp_row_normalize(state.spatial_raw, ADJ_FLOOR)
        z = srr_forward(obj_in, spatial_op, params)
        frames = frame_pool(z)
        f_hat = mhca_fuse(query, frames, params.temporal_attn, kv_offset=pe)
        if k == 0:
            state.temporal_raw = engine.row_softmax(
                engine.matmul(f_hat, engine.transpose(f_hat)), cfg.lambda_frame
            )
            state.temporal_initial = state.temporal_raw.data.copy()
        else:
            refine_step(state, frames, trr_out, params)
        temporal_op = engine.clamp_row_normalize(state.temporal_raw, ADJ_FLOOR)
        spatial_hist.append(spatial_op.data.copy())
        temporal_hist.append(temporal_op.data.copy())
        trr_out = trr_forward(z, temporal_op, f_hat, params)
        obj_in = trr_out

    spatial_op_final = engine.clamp_row_normalize(state.spatial_raw, ADJ_FLOOR)
    temporal_op_final = engine.clamp_row_normalize(state.temporal_raw, ADJ_FLOOR)
    spatial_hist.append(spatial_op_final.data.copy())
    temporal_hist.append(temporal_op_final.data.copy())

    frame_reps = frame_pool(trr_out)
    probs, keyframes = summarize_head(frame_reps, temporal_op_final, params)

    full = np.zeros((t_all, 2))
    full[:, 0] = 1.0
    full[:tv] = probs.data
    scores = SummaryScores(probs=full, keyframe_set=keyframes)
    diag = ForwardDiagnostics(
        probs=probs,
        spatial_op=spatial_op_final,
        temporal_op=temporal_op_final,
        frame_reps=frame_reps,
        query=query,
        spatial_op_history=spatial_hist,
        temporal_op_history=temporal_hist,
        n_valid=tv,
    )
    return ForwardResult(scores=scores, state=state, diag=diag)
