"""Feature containers, split configs, word-query selection, and the planted
synthetic dataset generator.

Container layout (magic "VGF1", all little-endian, features stored f32 and
promoted to f64 inside the engine):

    "VGF1" | u16 version | u32 T | u32 T_original | u16 N | u16 d_obj
    | u8 query_mode | u16 query_rows | u16 query_dim
    | picks u32*T | objects f32*T*N*d_obj | class_ids u16*T*N
    | class table (u16 count, then u16 byte-length + utf-8 per name)
    | query matrix f32*rows*dim
    | u8 has_binary [u8*T] | u8 has_scores [u16 users, f32*users*T]
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from videograph.errors import ConfigError, ParseError

MAGIC = b"VGF1"
VERSION = 1
QUERY_MODE_CODES = {"none": 0, "word": 1, "sentence": 2}
QUERY_MODE_NAMES = {v: k for k, v in QUERY_MODE_CODES.items()}


@dataclass
class FeatureSet:
    """Everything the engine consumes for one video."""

    video_id: str
    n_frames_original: int
    picks: np.ndarray                 # u32 (T,), strictly increasing
    objects: np.ndarray               # f32 (T, N, d_obj)
    class_ids: np.ndarray             # u16 (T, N)
    class_names: list[str]
    query_mode: str = "none"
    query_vectors: np.ndarray | None = None   # f32 (rows, dim)
    gt_binary: np.ndarray | None = None       # u8 (T,)
    gt_scores: np.ndarray | None = None       # f32 (users, T)

    @property
    def n_frames(self) -> int:
        return self.objects.shape[0]

    @property
    def n_objects(self) -> int:
        return self.objects.shape[1]

    @property
    def d_obj(self) -> int:
        return self.objects.shape[2]

    def frame_features(self) -> np.ndarray:
        """Per-frame mean object feature, the segmentation signal for eval."""
        return self.objects.astype(np.float64).mean(axis=1)

    def validate(self):
        t = self.n_frames
        if t < 1:
            raise ConfigError("feature set must contain at least one frame")
        if self.n_frames_original < t:
            raise ConfigError(
                f"original frame count {self.n_frames_original} < sampled {t}"
            )
        if self.picks.shape != (t,):
            raise ConfigError(f"picks shape {self.picks.shape} != ({t},)")
        if t > 1 and not (np.diff(self.picks.astype(np.int64)) > 0).all():
            raise ConfigError("picks must be strictly increasing")
        if int(self.picks[-1]) >= self.n_frames_original:
            raise ConfigError("picks exceed the original frame count")
        if self.class_ids.shape != (t, self.n_objects):
            raise ConfigError(f"class_ids shape {self.class_ids.shape} mismatched")
        if self.class_names and int(self.class_ids.max(initial=0)) >= len(self.class_names):
            raise ConfigError("class id outside the class-name table")
        if self.query_mode not in QUERY_MODE_CODES:
            raise ConfigError(f"unknown query mode {self.query_mode!r}")
        if self.gt_binary is not None and self.gt_binary.shape != (t,):
            raise ConfigError("gt_binary length != frame count")
        if self.gt_scores is not None and self.gt_scores.shape[1:] != (t,):
            raise ConfigError("gt_scores length != frame count")
        return self


def write_features(fs: FeatureSet, path) -> str:
    """Serialize to the container format; returns the payload sha256 hex."""
    fs.validate()
    t, n, d = fs.objects.shape
    rows, dim = (0, 0) if fs.query_vectors is None else fs.query_vectors.shape
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HIIHHBHH", VERSION, t, fs.n_frames_original, n, d,
                       QUERY_MODE_CODES[fs.query_mode], rows, dim)
    out += fs.picks.astype("<u4").tobytes()
    out += fs.objects.astype("<f4").tobytes()
    out += fs.class_ids.astype("<u2").tobytes()
    out += struct.pack("<H", len(fs.class_names))
    for name in fs.class_names:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
    if fs.query_vectors is not None:
        out += fs.query_vectors.astype("<f4").tobytes()
    if fs.gt_binary is not None:
        out += struct.pack("<B", 1)
        out += fs.gt_binary.astype("<u1").tobytes()
    else:
        out += struct.pack("<B", 0)
    if fs.gt_scores is not None:
        out += struct.pack("<BH", 1, fs.gt_scores.shape[0])
        out += fs.gt_scores.astype("<f4").tobytes()
    else:
        out += struct.pack("<B", 0)
    blob = bytes(out)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise ParseError(f"truncated file while reading {what}", self.pos)
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count, what), dtype=dtype).copy()


def read_features(path, expected_sha256: str | None = None) -> FeatureSet:
    """Parse a container; any structural problem names its byte offset.

    ``expected_sha256`` (e.g. from a producer's sidecar) is verified
    against the whole file before parsing.
    """
    blob = Path(path).read_bytes()
    if expected_sha256 is not None:
        digest = hashlib.sha256(blob).hexdigest()
        if digest != expected_sha256:
            raise ParseError(f"checksum mismatch: file {digest}, expected {expected_sha256}")
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise ParseError("bad magic (expected VGF1)", 0)
    version, t, t_orig, n, d, mode_code, rows, dim = r.unpack("<HIIHHBHH", "header")
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    if t == 0:
        raise ParseError("container declares zero frames", 6)
    if mode_code not in QUERY_MODE_NAMES:
        raise ParseError(f"unknown query mode code {mode_code}", 18)
    picks = r.array("<u4", t, "picks")
    objects = r.array("<f4", t * n * d, "objects").reshape(t, n, d)
    class_ids = r.array("<u2", t * n, "class ids").reshape(t, n)
    (n_names,) = r.unpack("<H", "class table size")
    names = []
    for _ in range(n_names):
        (ln,) = r.unpack("<H", "class name length")
        names.append(r.take(ln, "class name").decode("utf-8"))
    query = None
    if rows:
        query = r.array("<f4", rows * dim, "query matrix").reshape(rows, dim)
    (has_binary,) = r.unpack("<B", "binary flag")
    gt_binary = r.array("<u1", t, "binary labels") if has_binary else None
    (has_scores,) = r.unpack("<B", "score flag")
    gt_scores = None
    if has_scores:
        (users,) = r.unpack("<H", "user count")
        gt_scores = r.array("<f4", users * t, "user scores").reshape(users, t)
    if r.pos != len(blob):
        raise ParseError(f"{len(blob) - r.pos} trailing bytes", r.pos)
    fs = FeatureSet(
        video_id=Path(path).stem,
        n_frames_original=t_orig,
        picks=picks,
        objects=objects,
        class_ids=class_ids,
        class_names=names,
        query_mode=QUERY_MODE_NAMES[mode_code],
        query_vectors=query,
        gt_binary=gt_binary,
        gt_scores=gt_scores,
    )
    try:
        fs.validate()
    except ConfigError as exc:
        raise ParseError(str(exc), r.pos) from exc
    return fs


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# split configuration


@dataclass
class SplitConfig:
    setting: str = "standard"     # standard | augment | transfer
    round_index: int = 0
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def validate(self):
        if self.setting not in ("standard", "augment", "transfer"):
            raise ConfigError(f"unknown split setting {self.setting!r}")
        roles = [set(self.train), set(self.val), set(self.test)]
        for i in range(3):
            for j in range(i + 1, 3):
                shared = roles[i] & roles[j]
                if shared:
                    raise ConfigError(f"video ids in multiple roles: {sorted(shared)}")
        return self


def write_split(split: SplitConfig, path):
    split.validate()
    lines = [
        f"setting = {split.setting}",
        f"round = {split.round_index}",
        f"train = {' '.join(split.train)}",
        f"val = {' '.join(split.val)}",
        f"test = {' '.join(split.test)}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_split(path) -> SplitConfig:
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    split = SplitConfig(
        setting=values.get("setting", "standard"),
        round_index=int(values.get("round", 0)),
        train=values.get("train", "").split(),
        val=values.get("val", "").split(),
        test=values.get("test", "").split(),
    )
    return split.validate()


# ---------------------------------------------------------------------------
# word queries and training groundtruth


def select_word_queries(fs: FeatureSet, n_words: int):
    """Top classes by detection count over the whole video.

    Ties break alphabetically.  Returns (names, counts, exhausted) where
    ``exhausted`` flags fewer distinct classes than requested.
    """
    if not fs.class_names:
        raise ConfigError("feature set has no class table")
    counts: dict[str, int] = {}
    for cid in fs.class_ids.reshape(-1):
        name = fs.class_names[int(cid)]
        counts[name] = counts.get(name, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    exhausted = len(ranked) < n_words
    top = ranked[:n_words]
    return [name for name, _ in top], [count for _, count in top], exhausted


def make_training_keyframes(user_scores, fs: FeatureSet, **keyshot_kwargs) -> np.ndarray:
    """Collapse multi-user scores into one binary keyframe vector.

    Averages the user annotations, converts to keyshots on the sampled
    grid, and marks selected frames with 1.
    """
    scores = np.atleast_2d(np.asarray(user_scores, dtype=np.float64))
    if scores.shape[0] < 1:
        raise ConfigError("need at least one user score vector")
    mean_scores = scores.mean(axis=0)
    from videograph.evaluation import scores_to_keyshots

    summary = scores_to_keyshots(
        mean_scores, features=fs.frame_features(), **keyshot_kwargs
    )
    return summary.vector.astype(np.uint8)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Planted-event dataset description; prototypes depend on seed only."""

    frames: int = 64
    objects: int = 6
    d_obj: int = 64
    n_events: int = 4
    keyframe_ratio: float = 0.15
    noise_sigma: float = 0.1
    seed: int = 0
    video_index: int = 0
    users: int = 1
    query_mode: str = "word"
    d_word: int = 16

    def validate(self):
        if self.n_events < 2:
            raise ConfigError(f"n_events must be >= 2, got {self.n_events}")
        if not (0 < self.keyframe_ratio <= 0.5):
            raise ConfigError(f"keyframe_ratio must be in (0, 0.5], got {self.keyframe_ratio}")
        if self.frames < 2 * self.n_events:
            raise ConfigError("need at least two frames per event")
        if self.objects < 1 or self.d_obj < 1:
            raise ConfigError("objects and d_obj must be >= 1")
        if self.users < 1:
            raise ConfigError("users must be >= 1")
        return self


def _event_layout(spec: SyntheticSpec, rng) -> np.ndarray:
    """Contiguous event blocks covering [0, T); returns per-frame event ids."""
    t, e = spec.frames, spec.n_events
    min_len = max(2, t // (4 * e))
    weights = rng.uniform(1.0, 2.0, size=e)
    lengths = np.maximum(min_len, np.floor(weights / weights.sum() * t).astype(int))
    while lengths.sum() > t:
        lengths[int(np.argmax(lengths))] -= 1
    lengths[int(np.argmax(weights))] += t - lengths.sum()
    order = rng.permutation(e)
    ids = np.concatenate([np.full(lengths[i], order[i], dtype=int) for i in range(e)])
    return ids


def synthetic_event_ids(spec: SyntheticSpec) -> np.ndarray:
    """Per-frame planted event ids (recomputed deterministically)."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 1000 + spec.video_index])
    return _event_layout(spec, rng)


def generate_synthetic(spec: SyntheticSpec) -> FeatureSet:
    """Plant a video: prototype events, centrality-ranked scores, keyframes.

    Event prototypes, the salience direction, and query embeddings derive
    from ``seed`` alone so every video of a dataset shares them; layout,
    offsets, and noise depend on (seed, video_index).  Each event block is
    divided into short sub-shots; every sub-shot draws one centrality level
    (1 = at the prototype) and frames deviate from their event prototype
    along a fixed salience direction by 1 - centrality.  The groundtruth
    score is the cosine similarity of the frame's mean feature to its
    prototype, and the planted keyframes are the ceil(ratio * T) most
    prototype-central frames, allocated per event.
    """
    spec.validate()
    shared = np.random.default_rng(spec.seed)
    protos = shared.normal(size=(spec.n_events, spec.d_obj))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    protos *= 3.0
    # salience lives orthogonal to every prototype so the centrality signal
    # is identical across events (no event-specific intercept to unlearn)
    salience = shared.normal(size=spec.d_obj)
    for p in protos:
        salience -= (salience @ p) / (p @ p) * p
    salience /= np.linalg.norm(salience)
    # shot wobble directions come from a small shared basis so sub-shot
    # variation is dataset-wide structure, not memorizable per-video noise
    wobble_basis = shared.normal(size=(6, spec.d_obj))
    word_proj = shared.normal(size=(spec.d_obj, spec.d_word)) / np.sqrt(spec.d_obj)

    rng = np.random.default_rng([spec.seed, 1000 + spec.video_index])
    event_ids = _event_layout(spec, rng)
    t, n, d = spec.frames, spec.objects, spec.d_obj

    # object offsets are centered per event and orthogonal to the salience
    # direction, so the frame-mean feature is prototype + deviation + noise
    # and depth-to-similarity is the same map for every event
    offsets = rng.normal(scale=0.5, size=(spec.n_events, n, d))
    offsets -= np.einsum("end,d->en", offsets, salience)[:, :, None] * salience[None, None, :]
    offsets -= offsets.mean(axis=1, keepdims=True)
    centrality, shot_wobble = _subshot_profile(event_ids, rng, d, spec.keyframe_ratio, wobble_basis)
    jitter = rng.normal(scale=0.02, size=t)
    noise = rng.normal(scale=spec.noise_sigma, size=(t, n, d))

    # deviation amplitude vanishes with the noise scale: the noiseless limit
    # degenerates to prototype + offsets exactly
    amp = 6.0 * math.sqrt(spec.noise_sigma)
    for p in protos:
        shot_wobble -= (shot_wobble @ p)[:, None] / (p @ p) * p[None, :]
    norms = np.linalg.norm(shot_wobble, axis=1, keepdims=True)
    wobble_unit = shot_wobble / np.where(norms > 0, norms, 1.0)
    directions = 5.0 * salience[None, :] + wobble_unit
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    depth = np.clip(1.0 - centrality + jitter, 0.0, 1.2)
    deviation = amp * depth[:, None] * directions
    objects = protos[event_ids][:, None, :] + offsets[event_ids] + deviation[:, None, :] + noise
    objects = objects.astype(np.float32)

    frame_mean = objects.astype(np.float64).mean(axis=1)
    proto_t = protos[event_ids]
    sims = (frame_mean * proto_t).sum(axis=1) / (
        np.linalg.norm(frame_mean, axis=1) * np.linalg.norm(proto_t, axis=1)
    )
    lo, hi = sims.min(), sims.max()
    # a sub-rounding-error spread is a tie, not signal
    scores = (sims - lo) / (hi - lo) if hi - lo > 1e-12 else np.full(t, 0.5)

    n_key = math.ceil(spec.keyframe_ratio * t)
    gt_binary = np.zeros(t, dtype=np.uint8)
    ranked = np.argsort(-scores, kind="stable")
    gt_binary[ranked[:n_key]] = 1

    user_scores = [scores]
    for _ in range(spec.users - 1):
        noisy = np.clip(scores + rng.normal(scale=0.05, size=t), 0.0, 1.0)
        user_scores.append(noisy)

    class_names = [f"event{i}" for i in range(spec.n_events)] + ["clutter0", "clutter1"]
    class_ids = np.empty((t, n), dtype=np.uint16)
    for ti in range(t):
        class_ids[ti, : max(1, n - 1)] = event_ids[ti]
        if n > 1:
            class_ids[ti, n - 1] = spec.n_events + int(rng.integers(2))

    # word-query rows follow the detection-frequency ranking so that row i
    # corresponds to the i-th selected word (the convention query overrides
    # rely on); sentence mode stores one caption vector per event.
    query = None
    if spec.query_mode == "word":
        counts: dict[str, int] = {}
        for cid in class_ids.reshape(-1):
            name = class_names[int(cid)]
            counts[name] = counts.get(name, 0) + 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        rows = []
        for name, _ in ranked[: spec.n_events]:
            rows.append(_word_vector(name, protos, word_proj, spec.d_word))
        query = np.asarray(rows, dtype=np.float32)
    elif spec.query_mode == "sentence":
        query = protos.astype(np.float32)

    return FeatureSet(
        video_id=f"synth{spec.video_index:03d}",
        n_frames_original=t,
        picks=np.arange(t, dtype=np.uint32),
        objects=objects,
        class_ids=class_ids,
        class_names=class_names,
        query_mode=spec.query_mode,
        query_vectors=query,
        gt_binary=gt_binary,
        gt_scores=np.asarray(user_scores, dtype=np.float32),
    ).validate()


def _subshot_profile(event_ids: np.ndarray, rng, d: int, ratio: float, wobble_basis: np.ndarray):
    """Split each event block into 3-8 frame sub-shots and plant peaks.

    Peak sub-shots (centrality near 1) are chosen round-robin over events
    until their total length reaches about ``ratio`` of the video, so the
    intended summary fills the keyshot budget decisively; every other
    sub-shot sits well below.  Each sub-shot also draws a wobble direction
    shared by its frames (the change KTS detects).
    """
    t = event_ids.shape[0]
    shots = []
    start = 0
    while start < t:
        block_end = start
        while block_end < t and event_ids[block_end] == event_ids[start]:
            block_end += 1
        pos = start
        while pos < block_end:
            length = int(rng.integers(2, 6))
            if block_end - pos - length < 2:
                length = block_end - pos
            shots.append((pos, pos + length, event_ids[start]))
            pos += length
        start = block_end

    by_event: dict[int, list[int]] = {}
    for idx, (_, _, event) in enumerate(shots):
        by_event.setdefault(int(event), []).append(idx)
    remaining = max(2, int(math.floor(ratio * t)))
    peaks = set()
    event_order = [int(e) for e in rng.permutation(sorted(by_event))]
    progressed = True
    while remaining >= 2 and progressed:
        progressed = False
        for event in event_order:
            fits = [
                i for i in by_event[event]
                if i not in peaks and shots[i][1] - shots[i][0] <= remaining
            ]
            if not fits:
                continue
            # shortest first so the budget stretches across every event
            pick = min(fits, key=lambda i: (shots[i][1] - shots[i][0], i))
            peaks.add(pick)
            remaining -= shots[pick][1] - shots[pick][0]
            progressed = True
            if remaining < 2:
                break

    centrality = np.zeros(t)
    wobble = np.zeros((t, d))
    for idx, (a, b, _) in enumerate(shots):
        level = rng.uniform(0.9, 1.0) if idx in peaks else rng.uniform(0.05, 0.55)
        centrality[a:b] = level
        wobble[a:b] = wobble_basis[int(rng.integers(wobble_basis.shape[0]))]
    return centrality, wobble


def _word_vector(name: str, protos: np.ndarray, word_proj: np.ndarray, d_word: int) -> np.ndarray:
    """Deterministic word embedding: event prototypes project through the
    shared matrix; any other word hashes to a small fixed vector."""
    if name.startswith("event"):
        idx = int(name[len("event"):])
        if 0 <= idx < protos.shape[0]:
            return protos[idx] @ word_proj
    seed = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    return np.random.default_rng(seed).normal(scale=0.1, size=d_word)


