import json
import struct
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uniadapt.data import (DataError, Sample, WorldSpec, answer_prior, decode_records, encode_record,
                           gen_image_pair, gen_video_pair, gen_vqa_triple, generate, load_manifest,
                           load_split, parse_caption, read_split, write_dataset, write_split)

SPEC = WorldSpec(n_pretrain=64, n_train=32, n_test=16)
# 5 degrees of freedom at p = 0.001
CHI2_DF5_CRIT = 20.515


@settings(max_examples=30)
@given(st.integers(0, 200))
def test_image_pairs_deterministic(index):
    assert gen_image_pair(SPEC, index) == gen_image_pair(SPEC, index)


def test_seed_changes_payload():
    a = gen_image_pair(SPEC, 3).payload
    b = gen_image_pair(replace(SPEC, seed=1), 3).payload
    assert not np.array_equal(a, b)


@settings(max_examples=60)
@given(st.integers(0, 111))
def test_caption_faithful_to_payload(index):
    s = gen_image_pair(SPEC, index)
    shape, color, pos = parse_caption(SPEC, s.caption)
    assert (shape, color, pos) == s.attrs
    # The object patch is the only one with its presence flag set.
    flag = SPEC.n_shapes + SPEC.n_colors
    assert int(np.argmax(s.payload[:, flag])) == pos
    assert int(np.argmax(s.payload[pos, :SPEC.n_shapes])) == shape
    assert int(np.argmax(s.payload[pos, SPEC.n_shapes:flag])) == color


def test_parse_rejects_non_grammar():
    with pytest.raises(ValueError):
        parse_caption(SPEC, [SPEC.word("a")])


def test_zero_noise_same_attrs_same_payload():
    spec = replace(SPEC, noise=0.0)
    by_attrs = {}
    for i in range(200):
        s = gen_image_pair(spec, i)
        if s.attrs in by_attrs:
            np.testing.assert_array_equal(by_attrs[s.attrs], s.payload)
            return
        by_attrs[s.attrs] = s.payload
    pytest.fail("no repeated attributes in 200 samples")


def test_downstream_uses_other_templates():
    pre = {tuple(gen_image_pair(SPEC, i).caption[:1]) for i in range(0, 64)}
    down = {tuple(gen_image_pair(SPEC, i).caption[:1]) for i in range(64, 112)}
    assert pre.isdisjoint(down)


def test_vocab_covers_all_tokens():
    spec = replace(SPEC, synonyms=True)
    for i in range(112):
        s = gen_vqa_triple(spec, i)
        assert max(s.caption + s.question + s.answer) < spec.vocab_size


def test_video_salient_frames():
    s = gen_video_pair(SPEC, 70, 8)
    assert s.payload.shape == (8, SPEC.patches, SPEC.patch_dim) and s.salient
    for j in range(8):
        flag = SPEC.n_shapes + SPEC.n_colors
        pos = int(np.argmax(s.payload[j, :, flag]))
        attrs = (int(np.argmax(s.payload[j, pos, :SPEC.n_shapes])),
                 int(np.argmax(s.payload[j, pos, SPEC.n_shapes:flag])), pos)
        assert (attrs == s.attrs) == (j in s.salient)


def test_video_without_noise_is_all_salient():
    s = gen_video_pair(replace(SPEC, noise_frame_prob=0.0), 5, 6)
    assert s.salient == list(range(6))


def test_single_frame_video_is_image_pair():
    v, im = gen_video_pair(SPEC, 9, 1), gen_image_pair(SPEC, 9)
    np.testing.assert_array_equal(v.payload[0], im.payload)
    assert v.caption == im.caption and v.salient == [0]


def test_video_rejects_zero_frames():
    with pytest.raises(ValueError):
        gen_video_pair(SPEC, 0, 0)


def test_vqa_answer_matches_payload():
    for i in range(100):
        s = gen_vqa_triple(SPEC, i)
        shape, color, pos = s.attrs
        qword = s.question[0] if s.question[0] != SPEC.word("what") else s.question[1]
        expected = {SPEC.word("color"): SPEC.color_tok(color), SPEC.word("shape"): SPEC.shape_tok(shape),
                    SPEC.word("where"): SPEC.pos_tok(pos)}[qword]
        assert s.answer == [expected]


def test_answer_frequencies_match_prior():
    spec = WorldSpec(n_pretrain=10_000, n_train=0, n_test=0)
    counts = Counter(gen_vqa_triple(spec, i).answer[0] for i in range(10_000))
    prior = answer_prior(spec)
    assert abs(sum(prior.values()) - 1) < 1e-12
    for tok, p in prior.items():
        assert abs(counts[tok] / 10_000 - p) < 0.02


def _shape_counts(spec, lo, hi):
    c = Counter(gen_image_pair(spec, i).attrs[0] for i in range(lo, hi))
    return np.array([c[k] for k in range(spec.n_shapes)], dtype=float)


def test_shift_is_realised():
    spec = WorldSpec(n_pretrain=3000, n_train=3000, n_test=0)
    pre, down = _shape_counts(spec, 0, 3000), _shape_counts(spec, 3000, 6000)
    p_pre, _, _ = spec.priors(False)
    p_down, _, _ = spec.priors(True)
    chi_fit = ((down - 3000 * p_down) ** 2 / (3000 * p_down)).sum()
    chi_shift = ((down - 3000 * p_pre) ** 2 / (3000 * p_pre)).sum()
    assert chi_fit < CHI2_DF5_CRIT < chi_shift
    assert ((pre - 3000 * p_pre) ** 2 / (3000 * p_pre)).sum() < CHI2_DF5_CRIT


def test_splits_disjoint():
    ids = {split: {s.pair_id for s in generate(SPEC, "retrieval-image", split)} for split in ("pretrain", "train", "test")}
    assert not (ids["pretrain"] & ids["train"]) and not (ids["train"] & ids["test"]) and not (ids["pretrain"] & ids["test"])
    assert sum(map(len, ids.values())) == 112


def test_video_task_pretrains_on_images_and_uses_frame_counts():
    assert generate(SPEC, "retrieval-video", "pretrain")[0].payload.ndim == 2
    assert generate(SPEC, "retrieval-video", "train")[0].payload.shape[0] == SPEC.train_frames
    assert generate(SPEC, "retrieval-video", "test")[0].payload.shape[0] == SPEC.infer_frames
    with pytest.raises(ValueError):
        generate(SPEC, "captioning", "train")


# -- binary records -----------------------------------------------------------

def test_record_layout_little_endian():
    s = Sample(7, np.array([[1.5, -2.0]], dtype=np.float32), [4, 5], salient=[0])
    rec = encode_record(s)
    (n,) = struct.unpack_from("<I", rec)
    assert n == len(rec) - 4
    assert struct.unpack_from("<Q", rec, 4)[0] == 7
    assert struct.unpack_from("<I", rec, 12)[0] == 2
    assert struct.unpack_from("<2I", rec, 16) == (1, 2)
    assert struct.unpack_from("<2f", rec, 24) == (1.5, -2.0)


@pytest.mark.parametrize("task", ["retrieval-image", "retrieval-video", "vqa"])
def test_dataset_round_trip_byte_identical(task, tmp_path):
    spec = WorldSpec(n_pretrain=8, n_train=6, n_test=4, train_frames=3, infer_frames=5)
    write_dataset(spec, task, tmp_path / "a")
    for split in ("pretrain", "train", "test"):
        raw = (tmp_path / "a" / f"{split}.bin").read_bytes()
        samples = load_split(tmp_path / "a", split, spec)
        assert samples == generate(spec, task, split)
        write_split(tmp_path / f"{split}.bin", samples)
        assert (tmp_path / f"{split}.bin").read_bytes() == raw


def test_regeneration_identical_bytes(tmp_path):
    write_dataset(SPEC, "vqa", tmp_path / "a")
    write_dataset(SPEC, "vqa", tmp_path / "b")
    for f in ("pretrain.bin", "train.bin", "test.bin", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_manifest_mismatch_refused(tmp_path):
    write_dataset(SPEC, "retrieval-image", tmp_path)
    with pytest.raises(DataError, match="different world spec"):
        load_manifest(tmp_path, replace(SPEC, seed=9))
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["spec"]["noise"] = 0.5
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DataError, match="inconsistent"):
        load_manifest(tmp_path)


def test_truncated_records(tmp_path):
    rec = encode_record(gen_image_pair(SPEC, 0))
    with pytest.raises(DataError):
        decode_records(rec[:-3])
    with pytest.raises(DataError):
        decode_records(rec + b"\x01")
    write_split(tmp_path / "x.bin", [gen_image_pair(SPEC, i) for i in range(3)])
    assert len(read_split(tmp_path / "x.bin")) == 3


def test_unwritable_output_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError, match="file"):
        write_dataset(SPEC, "vqa", blocker / "sub")


def test_spec_validation():
    with pytest.raises(ValueError):
        WorldSpec(patch_dim=4)
    with pytest.raises(ValueError):
        WorldSpec(qtype_probs=(0.5, 0.5, 0.5))
