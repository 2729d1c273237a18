import numpy as np
import pytest

from finer import numerics as nx
from finer.corpus import LabelRegistry, Sentence
from finer.errors import ConfigurationError, ContractViolation, DeserializationError
from finer.tagger import (
    Checkpoint,
    Tagger,
    TaggerConfig,
    deserialize,
    expand_head,
    forward,
    gradients,
    make_batch,
    serialize,
    sgd_step,
    token_bucket,
)

REG = LabelRegistry(("LOC", "ORG", "PER"), 3)
SMALL = TaggerConfig(vocab_hash_buckets=64, embedding_dim=6, hidden_dim=8, seed=3)


def _model(version=2, config=SMALL):
    return Tagger.initialize(config, REG.at_version(version))


def test_default_config():
    cfg = TaggerConfig()
    assert cfg.hidden_dim % 12 == 0
    with pytest.raises(ConfigurationError):
        TaggerConfig(hidden_dim=7)
    with pytest.raises(ConfigurationError):
        TaggerConfig(hidden_dim=64).check_groups(12)


def test_forward_shapes():
    model = Tagger.initialize(TaggerConfig(hidden_dim=64, seed=1), REG.at_version(2))
    hidden, logits = model.forward(["a", "b", "c"])
    assert hidden.shape == (3, 64)
    assert logits.shape == (3, 5)


def test_forward_deterministic_and_checkpoint_equivalent():
    model = _model()
    s = Sentence(("x", "y", "z", "x"), (0, 0, 0, 0))
    a = forward(model, s)
    b = forward(model, s)
    ck = model.checkpoint()
    c = forward(deserialize(serialize(ck)), s)
    for u, v, w in zip(a, b, c):
        assert np.array_equal(u, v) and np.array_equal(u, w)


def test_forward_rejects_empty_sentence():
    with pytest.raises(ContractViolation):
        _model().forward([])


def test_hash_collision_gives_identical_rows():
    buckets = SMALL.vocab_hash_buckets
    seen = {}
    pair = None
    for i in range(10_000):
        w = f"tok{i}"
        b = token_bucket(w, buckets)
        if b in seen:
            pair = (seen[b], w)
            break
        seen[b] = w
    assert pair is not None
    model = _model()
    h1, l1 = model.forward(["ctx", pair[0], "end"])
    h2, l2 = model.forward(["ctx", pair[1], "end"])
    assert np.array_equal(h1, h2) and np.array_equal(l1, l2)


def test_packed_batch_matches_single_sentences():
    model = _model()
    sents = [Sentence(tuple(f"w{i}" for i in range(n)), (0,) * n) for n in (3, 1, 5, 2)]
    packed = model.forward_many(sents, batch_size=3)
    for s, (h, lg) in zip(sents, packed):
        h1, l1 = model.forward(s)
        np.testing.assert_allclose(h, h1, atol=1e-12)
        np.testing.assert_allclose(lg, l1, atol=1e-12)


def test_backward_direction_sees_future_context():
    model = _model()
    h1, _ = model.forward(["a", "b", "c"])
    h2, _ = model.forward(["a", "b", "zzz"])
    half = SMALL.hidden_dim // 2
    # forward half of token 0 ignores later tokens; backward half does not
    assert np.array_equal(h1[0, :half], h2[0, :half])
    assert not np.allclose(h1[0, half:], h2[0, half:])


def test_expand_head_by_zero_is_identity():
    model = _model()
    assert expand_head(model, []) is model


def test_expand_head_preserves_old_logits():
    model = _model(1)
    grown = expand_head(model, ["ORG"])
    assert grown.num_labels == model.num_labels + 2
    _, before = model.forward(["probe", "words"])
    _, after = grown.forward(["probe", "words"])
    assert np.array_equal(after[:, : model.num_labels], before)


def test_expand_head_sequential_equals_joint():
    base = _model(1)
    a = expand_head(expand_head(base, ["ORG"]), ["PER"])
    b = expand_head(base, ["ORG", "PER"])
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


@pytest.mark.parametrize("types", [["LOC"], ["ORG", "ORG"], ["PER"]])
def test_expand_head_rejects_bad_types(types):
    with pytest.raises(ConfigurationError):
        expand_head(_model(1), types)


def test_sgd_step_arithmetic():
    model = _model()
    theta = model.params["head.bias"].copy()
    theta[:] = 1.0
    model.params["head.bias"] = theta
    g = {"head.bias": np.full_like(theta, 2.0)}
    sgd_step(model, g, 0.5)
    assert np.all(model.params["head.bias"] == 0.0)


def test_sgd_step_zero_lr_and_linearity():
    rng = np.random.default_rng(0)
    model = _model()
    grads = {k: rng.normal(size=v.shape) for k, v in model.params.items()}
    before = serialize(model.checkpoint())
    sgd_step(model, grads, 0.0)
    assert serialize(model.checkpoint()) == before
    one, two = model.copy(), model.copy()
    sgd_step(one, grads, 0.2)
    sgd_step(sgd_step(two, grads, 0.1), grads, 0.1)
    for k in one.params:
        np.testing.assert_allclose(one.params[k], two.params[k], atol=1e-14)


def test_sgd_step_shape_mismatch():
    with pytest.raises(ContractViolation):
        sgd_step(_model(), {"head.bias": np.zeros(2)}, 0.1)


def test_checkpoint_is_immutable():
    ck = _model().checkpoint(2, 7)
    with pytest.raises(ValueError):
        ck.params["head.bias"][0] = 1.0
    with pytest.raises(TypeError):
        ck.params["x"] = np.zeros(1)


def test_serialize_round_trip():
    ck = _model().checkpoint(2, 7)
    data = serialize(ck)
    back = deserialize(data)
    assert serialize(back) == data
    assert back.task_index == 2 and back.round_index == 7
    assert back.registry == ck.registry and back.config == ck.config


@pytest.mark.parametrize("mutate", [
    lambda d: d[:-10],
    lambda d: d[:20],
    lambda d: b"XXXXXXXX" + d[8:],
    lambda d: d[:40] + bytes([d[40] ^ 1]) + d[41:],
    lambda d: d + b"\x00",
])
def test_deserialize_rejects_damage(mutate):
    data = serialize(_model().checkpoint())
    with pytest.raises(DeserializationError):
        deserialize(mutate(data))


def test_deserialize_rejects_unknown_version():
    import struct
    import zlib

    data = serialize(_model().checkpoint())
    body = data[:8] + struct.pack("<I", 99) + data[12:-4]
    with pytest.raises(DeserializationError):
        deserialize(body + struct.pack("<I", zlib.crc32(body)))


def test_model_gradients_match_finite_differences():
    model = _model(3, TaggerConfig(vocab_hash_buckets=16, embedding_dim=3, hidden_dim=4, seed=1))
    sents = [Sentence(("a", "b", "c"), (1, 0, 5)), Sentence(("d", "a"), (0, 3))]
    batch = make_batch(sents, model.config.vocab_hash_buckets)
    labels = np.concatenate([s.labels for s in sents])

    def loss(h, lg):
        return nx.mul(nx.sum_(nx.take_along(nx.log_softmax_op(lg, axis=1), labels)), -1.0)

    _, grads = gradients(model, loss, batch)
    for name in ("encoder.0.bwd.w_rec", "encoder.0.fwd.w_in", "head.weight", "embedding"):
        base = model.params[name]

        def f(x, name=name):
            p = dict(model.params)
            p[name] = x
            return float(loss(*model.encode(batch, p)).value)

        num = nx.numeric_gradient(f, base)
        assert nx.relative_error(grads[name], num) <= 1e-6, name
