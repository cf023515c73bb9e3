"""Deterministic synthetic cross-modal tasks with a pretrain/downstream distribution shift.

A scene is one object with a shape, a color and a position (one of the patch
slots).  The object's patch carries one-hot shape and color blocks plus a
presence flag; every feature gets bounded uniform noise.  Captions come from
templates; the downstream split reweights attribute priors and swaps to a
different template family (optionally with synonym words never seen during
pretraining).
"""
from __future__ import annotations

from dataclasses import dataclass, asdict, field
import hashlib
import json
import os
import struct

import numpy as np

SPLITS = ("pretrain", "train", "test")
FILLERS = ("a", "at", "there", "is", "the", "what", "color", "shape", "where", "of",
           "in", "picture", "showing", "with", "on", "spot")
N_SPECIAL = 3  # PAD, BOS, EOS
MAGIC_VERSION = 1


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    patches: int = 8
    patch_dim: int = 16
    n_shapes: int = 6
    n_colors: int = 6
    noise: float = 0.1
    shift: float = 1.5
    synonyms: bool = False
    noise_frame_prob: float = 0.75
    train_frames: int = 8
    infer_frames: int = 16
    n_pretrain: int = 2048
    n_train: int = 2048
    n_test: int = 512
    qtype_probs: tuple = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        if self.patch_dim < self.n_shapes + self.n_colors + 1:
            raise ValueError("patch_dim too small for the one-hot attribute blocks")
        if abs(sum(self.qtype_probs) - 1.0) > 1e-9:
            raise ValueError("qtype_probs must sum to 1")
        if min(self.n_pretrain, self.n_train, self.n_test) < 0:
            raise ValueError("split sizes must be nonnegative")

    @property
    def n_positions(self):
        return self.patches

    # -- vocabulary layout --
    @property
    def _offsets(self):
        o = N_SPECIAL + len(FILLERS)
        shapes = o
        colors = shapes + self.n_shapes
        positions = colors + self.n_colors
        syn_shapes = positions + self.n_positions
        syn_colors = syn_shapes + self.n_shapes
        end = syn_colors + self.n_colors
        return dict(shapes=shapes, colors=colors, positions=positions,
                    syn_shapes=syn_shapes, syn_colors=syn_colors, end=end)

    @property
    def vocab_size(self):
        return self._offsets["end"]

    def word(self, w):
        return N_SPECIAL + FILLERS.index(w)

    def shape_tok(self, s, downstream=False):
        key = "syn_shapes" if downstream and self.synonyms else "shapes"
        return self._offsets[key] + s

    def color_tok(self, c, downstream=False):
        key = "syn_colors" if downstream and self.synonyms else "colors"
        return self._offsets[key] + c

    def pos_tok(self, p):
        return self._offsets["positions"] + p

    def split_ranges(self):
        a = self.n_pretrain
        b = a + self.n_train
        return {"pretrain": (0, a), "train": (a, b), "test": (b, b + self.n_test)}

    def split_of(self, index):
        for name, (lo, hi) in self.split_ranges().items():
            if lo <= index < hi:
                return name
        return "test"

    def priors(self, downstream):
        """Attribute marginals (shape, color, position) for a split family."""
        def ramp(k):
            x = np.arange(k) / max(k - 1, 1)
            w = np.exp(-self.shift * (1.0 - x if downstream else x))
            return w / w.sum()
        return ramp(self.n_shapes), ramp(self.n_colors), np.full(self.n_positions, 1.0 / self.n_positions)

    def spec_hash(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Sample:
    pair_id: int
    payload: np.ndarray
    caption: list
    question: list = field(default_factory=list)
    answer: list = field(default_factory=list)
    salient: list = field(default_factory=list)
    attrs: tuple | None = None

    def __eq__(self, other):
        return (self.pair_id == other.pair_id and self.payload.shape == other.payload.shape
                and self.payload.tobytes() == other.payload.tobytes()
                and list(self.caption) == list(other.caption)
                and list(self.question) == list(other.question)
                and list(self.answer) == list(other.answer)
                and list(self.salient) == list(other.salient))


# -- generation -------------------------------------------------------------

def _rng(spec, *keys):
    return np.random.default_rng([spec.seed, *keys])


def _attrs(spec, rng, downstream):
    ps, pc, pp = spec.priors(downstream)
    return int(rng.choice(spec.n_shapes, p=ps)), int(rng.choice(spec.n_colors, p=pc)), \
        int(rng.choice(spec.n_positions, p=pp))


def render(spec, attrs, rng):
    """[patches, patch_dim] feature grid for one scene."""
    shape, color, pos = attrs
    x = rng.uniform(-spec.noise, spec.noise, (spec.patches, spec.patch_dim))
    x[pos, shape] += 1.0
    x[pos, spec.n_shapes + color] += 1.0
    x[pos, spec.n_shapes + spec.n_colors] += 1.0
    return x.astype(np.float32)


def caption_tokens(spec, attrs, downstream, template):
    shape, color, pos = attrs
    S, C, P = spec.shape_tok(shape, downstream), spec.color_tok(color, downstream), spec.pos_tok(pos)
    w = spec.word
    if not downstream:
        templates = [[w("a"), C, S, w("at"), P], [w("there"), w("is"), w("a"), C, S, w("at"), P]]
    else:
        templates = [[S, w("of"), C, w("in"), P], [w("picture"), w("showing"), P, w("with"), S, C]]
    return templates[template]


def parse_caption(spec, tokens):
    """Invert the template grammar: recover (shape, color, position) from caption tokens."""
    o = spec._offsets
    shape = color = pos = None
    for t in tokens:
        if o["shapes"] <= t < o["colors"]:
            shape = t - o["shapes"]
        elif o["colors"] <= t < o["positions"]:
            color = t - o["colors"]
        elif o["positions"] <= t < o["syn_shapes"]:
            pos = t - o["positions"]
        elif o["syn_shapes"] <= t < o["syn_colors"]:
            shape = t - o["syn_shapes"]
        elif o["syn_colors"] <= t < o["end"]:
            color = t - o["syn_colors"]
    if None in (shape, color, pos):
        raise ValueError(f"caption {tokens} does not follow the template grammar")
    return shape, color, pos


def gen_image_pair(spec: WorldSpec, index: int) -> Sample:
    if index < 0:
        raise ValueError("index must be >= 0")
    downstream = spec.split_of(index) != "pretrain"
    rng = _rng(spec, index)
    attrs = _attrs(spec, rng, downstream)
    template = int(rng.integers(2))
    payload = render(spec, attrs, _rng(spec, index, 0))
    return Sample(index, payload, caption_tokens(spec, attrs, downstream, template), attrs=attrs)


def gen_video_pair(spec: WorldSpec, index: int, n_frames: int) -> Sample:
    """Video of ``n_frames`` grids; distractor frames show unrelated scenes."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    base = gen_image_pair(spec, index)
    downstream = spec.split_of(index) != "pretrain"
    rng = _rng(spec, index, 10 ** 6)
    forced = int(rng.integers(n_frames))
    frames, salient = [], []
    for j in range(n_frames):
        frng = _rng(spec, index, j)
        if j != forced and rng.random() < spec.noise_frame_prob:
            other = base.attrs
            while other == base.attrs:
                other = _attrs(spec, rng, downstream)
            frames.append(render(spec, other, frng))
        else:
            frames.append(render(spec, base.attrs, frng))
            salient.append(j)
    return Sample(index, np.stack(frames), base.caption, salient=salient, attrs=base.attrs)


QTYPES = ("color", "shape", "position")


def gen_vqa_triple(spec: WorldSpec, index: int) -> Sample:
    base = gen_image_pair(spec, index)
    downstream = spec.split_of(index) != "pretrain"
    rng = _rng(spec, index, 2 * 10 ** 6)
    qtype = QTYPES[int(rng.choice(3, p=spec.qtype_probs))]
    shape, color, pos = base.attrs
    w = spec.word
    S, C, P = spec.shape_tok(shape, downstream), spec.color_tok(color, downstream), spec.pos_tok(pos)
    if qtype == "color":
        q, a = [w("what"), w("color"), w("is"), w("the"), S], [C]
    elif qtype == "shape":
        q, a = [w("what"), w("shape"), w("is"), w("at"), P], [S]
    else:
        q, a = [w("where"), w("is"), w("the"), C, S], [P]
    return Sample(index, base.payload, base.caption, q, a, attrs=base.attrs)


def answer_prior(spec: WorldSpec, downstream=False):
    """Exact answer-token distribution implied by the question and attribute priors."""
    ps, pc, pp = spec.priors(downstream)
    qc, qs, qp = spec.qtype_probs
    out = {}
    for c, p in enumerate(pc):
        out[spec.color_tok(c, downstream)] = out.get(spec.color_tok(c, downstream), 0) + qc * p
    for s, p in enumerate(ps):
        out[spec.shape_tok(s, downstream)] = out.get(spec.shape_tok(s, downstream), 0) + qs * p
    for k, p in enumerate(pp):
        out[spec.pos_tok(k)] = out.get(spec.pos_tok(k), 0) + qp * p
    return out


def generate(spec: WorldSpec, task: str, split: str, n_frames=None):
    lo, hi = spec.split_ranges()[split]
    if task == "retrieval-image":
        return [gen_image_pair(spec, i) for i in range(lo, hi)]
    if task == "retrieval-video":
        if split == "pretrain":
            return [gen_image_pair(spec, i) for i in range(lo, hi)]
        n = n_frames or (spec.train_frames if split == "train" else spec.infer_frames)
        return [gen_video_pair(spec, i, n) for i in range(lo, hi)]
    if task == "vqa":
        return [gen_vqa_triple(spec, i) for i in range(lo, hi)]
    raise ValueError(f"unknown task {task!r}")


# -- binary records -----------------------------------------------------------

def _pack_tokens(toks):
    return struct.pack("<I", len(toks)) + np.asarray(toks, dtype="<u4").tobytes()


def encode_record(s: Sample) -> bytes:
    dims = s.payload.shape
    body = struct.pack("<Q", s.pair_id) + struct.pack("<I", len(dims)) + \
        np.asarray(dims, dtype="<u4").tobytes() + np.ascontiguousarray(s.payload, dtype="<f4").tobytes()
    for toks in (s.caption, s.question, s.answer, s.salient):
        body += _pack_tokens(toks)
    return struct.pack("<I", len(body)) + body


def decode_records(buf: bytes):
    out, off = [], 0
    while off < len(buf):
        if off + 4 > len(buf):
            raise DataError("truncated record header")
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        if off + n > len(buf):
            raise DataError("truncated record body")
        rec = memoryview(buf)[off: off + n]
        off += n
        p = 0
        (pid,) = struct.unpack_from("<Q", rec, p); p += 8
        (rank,) = struct.unpack_from("<I", rec, p); p += 4
        dims = tuple(int(x) for x in np.frombuffer(rec, "<u4", rank, p)); p += 4 * rank
        count = int(np.prod(dims)) if dims else 1
        payload = np.frombuffer(rec, "<f4", count, p).reshape(dims).astype(np.float32); p += 4 * count
        lists = []
        for _ in range(4):
            (k,) = struct.unpack_from("<I", rec, p); p += 4
            lists.append([int(x) for x in np.frombuffer(rec, "<u4", k, p)]); p += 4 * k
        if p != n:
            raise DataError("record length mismatch")
        out.append(Sample(int(pid), payload, *lists))
    return out


def write_split(path, samples):
    with open(path, "wb") as fh:
        for s in samples:
            fh.write(encode_record(s))


def read_split(path):
    with open(path, "rb") as fh:
        return decode_records(fh.read())


def write_dataset(spec: WorldSpec, task: str, out_dir):
    """Write every split plus a JSON manifest; returns the manifest dict."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out_dir}: {e}") from e
    manifest = {"version": MAGIC_VERSION, "task": task, "spec_hash": spec.spec_hash(),
                "spec": asdict(spec), "splits": {}}
    for split in SPLITS:
        samples = generate(spec, task, split)
        fname = f"{split}.bin"
        path = os.path.join(out_dir, fname)
        try:
            write_split(path, samples)
        except OSError as e:
            raise DataError(f"cannot write {path}: {e}") from e
        lo, hi = spec.split_ranges()[split]
        manifest["splits"][split] = {"file": fname, "range": [lo, hi], "count": len(samples)}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def spec_from_dict(d):
    d = dict(d)
    if "qtype_probs" in d:
        d["qtype_probs"] = tuple(d["qtype_probs"])
    return WorldSpec(**d)


def load_manifest(data_dir, spec: WorldSpec | None = None):
    path = os.path.join(data_dir, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    stored = spec_from_dict(manifest["spec"])
    if stored.spec_hash() != manifest["spec_hash"]:
        raise DataError(f"manifest {path} is internally inconsistent (spec hash mismatch)")
    if spec is not None and spec.spec_hash() != manifest["spec_hash"]:
        raise DataError(f"dataset at {data_dir} was generated from a different world spec "
                        f"({manifest['spec_hash'][:12]} != {spec.spec_hash()[:12]})")
    return manifest


def load_split(data_dir, split, spec: WorldSpec | None = None):
    manifest = load_manifest(data_dir, spec)
    info = manifest["splits"][split]
    samples = read_split(os.path.join(data_dir, info["file"]))
    if len(samples) != info["count"]:
        raise DataError(f"{split}: expected {info['count']} records, found {len(samples)}")
    return samples
