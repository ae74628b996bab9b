import numpy as np
import pytest

from flimseg import sunet
from flimseg.encoder import EncoderSpec, LayerSpec, build_encoder
from flimseg.markers import Marker, MarkerSet
from flimseg.volume import LabelVolume, Volume

TINY = sunet.SunetConfig(encoder_widths=(2, 4, 8))


def _pair(rng, size=16):
    flair = Volume(data=rng.normal(size=(1, size, size, size)).astype(np.float32))
    t1gd = Volume(data=rng.normal(size=(1, size, size, size)).astype(np.float32))
    return flair, t1gd


def _case(rng, size=16):
    flair, t1gd = _pair(rng, size)
    labels = LabelVolume(data=rng.integers(0, 4, size=(size, size, size)))

    class Case:
        pass

    case = Case()
    case.case_id = "c0"
    case.flair, case.t1gd, case.labels = flair, t1gd, labels
    return case


def _tiny_flim_model(rng, size=16, seed=0):
    encoders = {}
    for modality in ("FLAIR", "T1Gd"):
        vol = Volume(data=rng.normal(size=(1, size, size, size)).astype(np.float32))
        vox = [tuple(int(v) for v in rng.integers(2, size - 2, size=3)) for _ in range(14)]
        ms = MarkerSet(
            image_id="m0", modality=modality,
            markers=(
                Marker(id=1, label="ED", voxels=tuple(dict.fromkeys(vox[:7]))),
                Marker(id=2, label="OTHER", voxels=tuple(dict.fromkeys(vox[7:]))),
            ),
        )
        spec = EncoderSpec(layers=(LayerSpec(pca_out=2), LayerSpec(pca_out=4), LayerSpec(pca_out=8)))
        encoders[modality] = build_encoder([vol], [ms], spec, seed=seed)
    return sunet.init_flim_model(encoders, seed=seed)


def test_forward_shapes_and_softmax():
    rng = np.random.default_rng(0)
    model = sunet.init_plain_model(TINY, seed=1)
    flair, t1gd = _pair(rng)
    logits = sunet.forward(model, flair, t1gd)
    assert logits.data.shape == (4, 16, 16, 16)
    probs = sunet.softmax_cl(np.ascontiguousarray(logits.data.transpose(1, 2, 3, 0)))
    assert np.abs(probs.sum(axis=-1) - 1.0).max() < 1e-5


def test_encoder_scale_chain():
    rng = np.random.default_rng(1)
    model = sunet.init_plain_model(TINY, seed=1)
    flair, t1gd = _pair(rng)
    cache = sunet.encode_case(model, flair, t1gd)
    assert [b.shape[0] for b in cache["skips_FLAIR"]] == [16, 8, 4]
    assert cache["bottom"].shape == (2, 2, 2, 16)  # 2 * deepest width


def test_input_validation():
    rng = np.random.default_rng(2)
    model = sunet.init_plain_model(TINY, seed=1)
    flair, _ = _pair(rng, 16)
    _, odd = _pair(rng, 12)
    with pytest.raises(ValueError, match="divisible"):
        bad = Volume(data=rng.normal(size=(1, 12, 12, 12)).astype(np.float32))
        sunet.forward(model, bad, bad)
    with pytest.raises(ValueError, match="share"):
        sunet.forward(model, flair, odd)


def test_loss_perfect_and_uniform():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 4, size=(4, 4, 4))
    perfect = np.full((4, 4, 4, 4), -20.0, dtype=np.float32)
    for c in range(4):
        perfect[..., c][labels == c] = 20.0
    loss, _ = sunet.segmentation_loss(perfect, labels)
    assert loss < 1e-4

    uniform = np.zeros((4, 4, 4, 4), dtype=np.float32)
    loss_u, _ = sunet.segmentation_loss(uniform, labels)
    ce = np.log(4.0)  # -log(1/4)
    # dice term for uniform probs: p = 1/4 everywhere
    smooth = 1e-5
    n = labels.size
    dice_terms = []
    for c in (1, 2, 3):
        g = float((labels == c).sum())
        dice_terms.append((2 * 0.25 * g + smooth) / (0.25 * n + g + smooth))
    expected = 0.5 * ce + 0.5 * (1 - np.mean(dice_terms))
    assert loss_u == pytest.approx(expected, rel=1e-5)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(3, 4, 5, 4))
    labels = rng.integers(0, 4, size=(3, 4, 5))
    _, grad = sunet.segmentation_loss(logits, labels)
    eps = 1e-6
    for _ in range(30):
        i = tuple(int(v) for v in (rng.integers(3), rng.integers(4), rng.integers(5), rng.integers(4)))
        lp = logits.copy()
        lp[i] += eps
        lm = logits.copy()
        lm[i] -= eps
        fd = (sunet.segmentation_loss(lp, labels)[0] - sunet.segmentation_loss(lm, labels)[0]) / (2 * eps)
        denom = max(abs(fd), abs(grad[i]), 1e-6)
        assert abs(fd - grad[i]) / denom < 1e-3


def test_loss_label_range_error():
    logits = np.zeros((2, 2, 2, 4))
    with pytest.raises(ValueError, match="class range"):
        sunet.segmentation_loss(logits, np.full((2, 2, 2), 5))


def test_predict_labels_rules():
    rng = np.random.default_rng(5)
    model = sunet.init_plain_model(TINY, seed=2)
    flair, t1gd = _pair(rng)
    labels = sunet.predict_labels(model, flair, t1gd)
    assert labels.data.shape == (16, 16, 16)
    # argmax invariance: shifting all logits leaves the labels unchanged
    logits = sunet.forward(model, flair, t1gd)
    shifted = logits.data + 3.7
    assert np.array_equal(
        np.argmax(shifted, axis=0), labels.data.astype(np.int64)
    )
    # tie-breaking: equal logits for class 0 and 3 pick class 0
    tied = np.zeros((4, 2, 2, 2), dtype=np.float32)
    tied[0] = 1.0
    tied[3] = 1.0
    assert np.all(np.argmax(tied, axis=0) == 0)


def test_lr_schedule_linear_decay():
    tc = sunet.TrainConfig(epochs=100)
    assert tc.lr_at(50) == pytest.approx(1.25e-3)
    assert tc.lr_at(0) == pytest.approx(2.5e-3)
    assert tc.lr_at(100) == pytest.approx(0.0)


def test_pbp_freezes_encoders_bit_exact():
    rng = np.random.default_rng(6)
    model = _tiny_flim_model(rng)
    before = {k: v.copy() for k, v in model.params.items() if k.startswith("enc.")}
    decoder_before = {k: v.copy() for k, v in model.params.items() if k.startswith("dec.")}
    tc = sunet.TrainConfig(epochs=2, seed=0)
    trained, curve = sunet.train(model, [_case(rng)], tc, regime="pbp")
    for name, tensor in before.items():
        assert np.array_equal(trained.params[name], tensor), name
    changed = any(
        not np.array_equal(trained.params[k], v) for k, v in decoder_before.items()
    )
    assert changed
    assert len(curve) == 2
    assert set(trained.frozen) >= set(before)


def test_training_determinism_same_seed():
    rng = np.random.default_rng(7)
    model = sunet.init_plain_model(TINY, seed=3)
    cases = [_case(np.random.default_rng(8)), _case(np.random.default_rng(9))]
    tc = sunet.TrainConfig(epochs=2, seed=5)
    t1, c1 = sunet.train(model, cases, tc, regime="fbp")
    t2, c2 = sunet.train(model, cases, tc, regime="fbp")
    assert c1 == c2
    for name in t1.params:
        assert np.array_equal(t1.params[name], t2.params[name])


def test_regime_validation():
    rng = np.random.default_rng(10)
    plain = sunet.init_plain_model(TINY, seed=0)
    flim = _tiny_flim_model(rng)
    tc = sunet.TrainConfig(epochs=1)
    case = _case(rng)
    with pytest.raises(ValueError, match="marker-estimated"):
        sunet.train(plain, [case], tc, regime="pbp")
    with pytest.raises(ValueError, match="randomly initialized"):
        sunet.train(flim, [case], tc, regime="fbp")
    with pytest.raises(ValueError, match="empty"):
        sunet.train(plain, [], tc, regime="fbp")
    with pytest.raises(ValueError, match="regime"):
        sunet.train(plain, [case], tc, regime="nope")


def test_ft_updates_encoders():
    rng = np.random.default_rng(11)
    model = _tiny_flim_model(rng)
    tc = sunet.TrainConfig(epochs=1, seed=0)
    trained, _ = sunet.train(model, [_case(rng)], tc, regime="ft")
    enc_changed = any(
        not np.array_equal(trained.params[k], model.params[k])
        for k in model.params
        if k.startswith("enc.") and k.endswith(".w")
    )
    assert enc_changed
    # centralization constants never move
    for k in model.params:
        if k.endswith(".mean") or k.endswith(".std"):
            assert np.array_equal(trained.params[k], model.params[k])


def test_checkpoint_round_trip_and_byte_determinism(tmp_path):
    rng = np.random.default_rng(12)
    model = _tiny_flim_model(rng)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    sunet.save_checkpoint(model, p1)
    sunet.save_checkpoint(model, p2)
    assert p1.read_bytes() == p2.read_bytes()
    loaded = sunet.load_checkpoint(p1)
    assert loaded.mode == model.mode
    assert loaded.config == model.config
    assert loaded.frozen == model.frozen
    for name in model.params:
        assert np.array_equal(loaded.params[name], model.params[name])
    flair, t1gd = _pair(rng)
    a = sunet.forward(model, flair, t1gd)
    b = sunet.forward(loaded, flair, t1gd)
    assert np.array_equal(a.data, b.data)


def test_pbp_cached_path_matches_full_graph():
    rng = np.random.default_rng(13)
    model = _tiny_flim_model(rng)
    flair, t1gd = _pair(rng)
    cache = sunet.encode_case(model, flair, t1gd)
    logits_cached, _ = sunet.build_decoder_graph(model, cache, set())
    full = sunet.forward(model, flair, t1gd)
    assert np.array_equal(
        logits_cached.data, np.ascontiguousarray(full.data.transpose(1, 2, 3, 0))
    )
