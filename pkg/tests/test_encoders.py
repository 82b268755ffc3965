import json

import numpy as np
import pytest

from medusa_lab import corpus as corp
from medusa_lab.encoders import (
    EncoderArch,
    SurrogateSet,
    alignment_loss,
    bag_of_words,
    dumps_pair,
    encode_image,
    encode_images,
    encode_text,
    fit_aligned_pair,
    init_pair,
    load_pair,
    loads_pair,
    save_pair,
    train_aligned_pair,
)
from medusa_lab.errors import (
    ContractError,
    DegenerateVectorError,
    IngestionError,
    ParseError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from medusa_lab.numkit import Rng
from medusa_lab.records import Image, Report
from medusa_lab.vocab import VOCAB


@pytest.fixture(scope="module")
def pair():
    return init_pair(EncoderArch(), seed=11, name="p")


def _img(rng, h=32, w=32):
    return Image("i", "normal", rng.uniform(0, 1, (h, w)))


def test_default_arch_matches_documented_scale():
    a = EncoderArch()
    assert (a.height, a.width, a.patch, a.hidden, a.embed_dim, a.vocab_size) == (32, 32, 8, 64, 32, 64)


@pytest.mark.parametrize("kw", [{"embed_dim": 1}, {"patch": 5}, {"hidden": 8}, {"vocab": ()},
                                {"vocab": ("a", "a")}])
def test_arch_invariants(kw):
    with pytest.raises(ContractError):
        EncoderArch(**kw)


def test_image_embedding_unit_and_deterministic(pair, rng):
    im = _img(rng)
    a, b = encode_image(pair, im), encode_image(pair, im)
    assert abs(np.linalg.norm(a) - 1) <= 1e-9
    np.testing.assert_array_equal(a, b)


def test_image_embedding_matches_straight_line_oracle(pair, rng):
    px = rng.uniform(0, 1, (32, 32))
    w = pair.image_weights
    pooled = np.array([[px[8 * i:8 * i + 8, 8 * j:8 * j + 8].mean() for j in range(4)]
                       for i in range(4)]).ravel()
    z = w["W2"] @ np.tanh(w["W1"] @ pooled + w["b1"]) + w["b2"]
    np.testing.assert_allclose(encode_image(pair, px), z / np.linalg.norm(z), rtol=0, atol=1e-13)


def test_image_shape_mismatch(pair):
    with pytest.raises(ContractError):
        encode_images(pair, np.zeros((1, 16, 16)))


def test_text_bag_symmetry_and_unit(pair):
    a = encode_text(pair, Report("r", "normal", ("clear", "chest")))
    b = encode_text(pair, Report("r", "normal", ("chest", "clear")))
    np.testing.assert_array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1) <= 1e-9


def test_text_matches_oracle(pair):
    rep = Report("r", "pneumonia", ("opacity", "opacity", "the", "dense"))
    counts = np.zeros(len(VOCAB))
    for t in rep.tokens:
        counts[VOCAB.index(t)] += 1
    z = pair.text_weights["W"] @ counts + pair.text_weights["b"]
    np.testing.assert_allclose(encode_text(pair, rep), z / np.linalg.norm(z), atol=1e-14)


def test_empty_report_is_degenerate(pair):
    with pytest.raises(DegenerateVectorError):
        encode_text(pair, Report("e", "normal", ()))


def test_oov_token_names_the_token(pair):
    with pytest.raises(IngestionError) as err:
        bag_of_words(pair, ("clear", "zebra"))
    assert err.value.token == "zebra"
    assert "zebra" in str(err.value)


def _corpus(n_per_class, seed=0, size=32):
    spec = corp.SyntheticCorpusSpec(height=size, width=size)
    return corp.gen_pairs(spec, {"normal": n_per_class, "pneumonia": n_per_class},
                          Rng(seed).child("t"), "t")


def test_single_item_corpus_has_zero_loss():
    data = _corpus(1)[:1]
    p = train_aligned_pair(data, EncoderArch(), seed=0, epochs=1, min_accuracy=0.0)
    px = np.stack([data[0][0].pixels])
    bags = np.stack([bag_of_words(p, data[0][1].tokens)])
    weights = {**p.image_weights, **p.text_weights}
    _, loss, _ = alignment_loss(weights, p.arch, px, bags, 0.1)
    assert float(loss.value) == 0.0


def test_seeds_give_different_weights():
    a, b = init_pair(EncoderArch(), 1), init_pair(EncoderArch(), 2)
    assert not np.array_equal(a.weight_vector(), b.weight_vector())


def test_members_are_heterogeneous():
    archs = [EncoderArch(hidden=64), EncoderArch(hidden=64), EncoderArch(hidden=48)]
    pairs = [init_pair(a, s) for a, s in zip(archs, (1, 2, 3))]
    for i in range(3):
        for j in range(i + 1, 3):
            u, v = pairs[i].weight_vector(), pairs[j].weight_vector()
            if u.size == v.size:
                assert u @ v / (np.linalg.norm(u) * np.linalg.norm(v)) < 0.99


def test_training_reaches_threshold_and_is_reproducible():
    data = _corpus(100, seed=3)  # 200 pairs, two classes
    p1, info = fit_aligned_pair(data, EncoderArch(), seed=5, epochs=150)
    assert info.heldout_accuracy >= 0.90
    assert info.n_heldout == 40
    p2, _ = fit_aligned_pair(data, EncoderArch(), seed=5, epochs=150)
    assert p1 == p2


def test_training_divergence_carries_accuracy():
    data = _corpus(10)
    with pytest.raises(TrainingDivergedError) as err:
        fit_aligned_pair(data, EncoderArch(), seed=0, epochs=1, min_accuracy=1.01)
    assert 0.0 <= err.value.accuracy <= 1.0


def test_training_rejects_mismatched_pairs(rng):
    with pytest.raises(ContractError):
        fit_aligned_pair([(_img(rng), Report("r", "pneumonia", ("opacity",)))])
    with pytest.raises(ContractError):
        fit_aligned_pair([])


# -- serialization -------------------------------------------------------------


def test_round_trip_bit_exact(pair, tmp_path):
    save_pair(pair, tmp_path / "p.json")
    assert load_pair(tmp_path / "p.json") == pair
    doc = json.loads((tmp_path / "p.json").read_text())
    assert set(doc) >= {"arch", "image_weights", "text_weights", "seed", "tag"}


def test_truncated_file_reports_offset(pair):
    text = dumps_pair(pair)
    with pytest.raises(ParseError) as err:
        loads_pair(text[: len(text) // 2])
    assert err.value.offset > 0


def test_shape_header_mismatch(pair):
    doc = json.loads(dumps_pair(pair))
    doc["image_weights"]["b1"]["shape"] = [3]
    with pytest.raises(ShapeMismatchError):
        loads_pair(json.dumps(doc))


# -- surrogate sets ------------------------------------------------------------


def test_surrogate_set_partition_rules():
    arch = EncoderArch()
    ms = [init_pair(arch, i, name=f"m{i}") for i in range(3)]
    s = SurrogateSet.split(ms, ("m2",))
    assert [m.name for m in s.train] == ["m0", "m1"] and [m.name for m in s.test] == ["m2"]
    with pytest.raises(ContractError):
        SurrogateSet(ms, (0, 1), (1, 2))
    with pytest.raises(ContractError):
        SurrogateSet(ms, (), (0, 1, 2))
    with pytest.raises(ContractError):
        SurrogateSet([init_pair(arch, 9, tag="victim")], (0,))
    with pytest.raises(ContractError):
        s.assert_excludes(ms[0])
    s.assert_excludes(init_pair(arch, 7, name="v"))
