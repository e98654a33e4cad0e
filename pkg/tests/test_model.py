import numpy as np
import pytest

from attnseg import attention
from attnseg.model import (
    CheckpointError,
    ModelConfig,
    build_model,
    checkpoint_bytes,
    forward,
    load_checkpoint,
    normalize_attention,
    parse_checkpoint,
    predict,
    save_checkpoint,
)
from attnseg.tensor import ContractError, Tape, Tensor, finite_diff_check, softmax_channels
from attnseg.train import cross_entropy


def tiny(attn="cascade", **kw):
    cfg = dict(in_channels=3, num_classes=2, encoder_widths=[8], attention=attn, seed=0)
    cfg.update(kw)
    return build_model(ModelConfig(**cfg))


def test_same_seed_gives_identical_parameters():
    a, b = tiny(seed=5), tiny(seed=5)
    assert a.params.keys() == b.params.keys()
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()


def test_different_seed_changes_weights():
    a, b = tiny(seed=1), tiny(seed=2)
    assert not np.array_equal(a.params["enc0.weight"].data, b.params["enc0.weight"].data)


@pytest.mark.parametrize("widths", [[8], [16, 32], [32, 16, 8]])
def test_attention_parameter_delta(widths):
    base = build_model(ModelConfig(encoder_widths=widths, attention="none"))
    full = build_model(ModelConfig(encoder_widths=widths, attention="cascade"))
    c = widths[0]
    assert full.param_count() - base.param_count() == c * c // 4 + 98


def test_single_gate_deltas():
    c = 16
    base = build_model(ModelConfig(encoder_widths=[c], attention="none")).param_count()
    ch = build_model(ModelConfig(encoder_widths=[c], attention="channel_only")).param_count()
    sp = build_model(ModelConfig(encoder_widths=[c], attention="spatial_only")).param_count()
    assert (ch - base, sp - base) == (c * c // 4, 98)


def test_shape_contract():
    m = build_model(ModelConfig(encoder_widths=[16], num_classes=2))
    x = np.random.default_rng(0).random((1, 3, 32, 32))
    assert forward(m, x).shape == (1, 2, 32, 32)


@pytest.mark.parametrize("hw", [(8, 8), (16, 24), (40, 8)])
def test_output_resolution_matches_input(hw):
    m = tiny(encoder_widths=[8, 8])
    x = np.random.default_rng(1).random((2, 3) + hw)
    assert m.forward(x).shape == (2, 2) + hw


def test_invalid_configs_rejected():
    with pytest.raises(ContractError):
        ModelConfig(num_classes=1).validate()
    with pytest.raises(ContractError):
        ModelConfig(encoder_widths=[]).validate()
    with pytest.raises(ContractError, match="8"):
        build_model(ModelConfig(encoder_widths=[12], attention="cascade"))
    build_model(ModelConfig(encoder_widths=[12], attention="none"))
    with pytest.raises(ContractError):
        normalize_attention("sideways")


def test_attention_aliases():
    assert normalize_attention("channel") == "channel_only"
    assert normalize_attention("spatial") == "spatial_only"
    assert normalize_attention("cascade") == "cascade"


def test_zero_input_and_zero_head_give_zero_logits():
    m = tiny()
    m.params["head.weight"] = Tensor(np.zeros_like(m.params["head.weight"].data))
    out = m.forward(np.zeros((1, 3, 8, 8)))
    assert np.all(out.data == 0)


def test_identical_samples_identical_logits():
    m = tiny()
    x = np.random.default_rng(2).random((1, 3, 16, 16))
    out = m.forward(np.concatenate([x, x])).data
    assert np.array_equal(out[0], out[1])


def test_eval_forward_is_pure_and_unrecorded():
    m = tiny()
    x = np.random.default_rng(3).random((1, 3, 16, 16))
    with Tape() as tape:
        a = m.forward(x, "eval")
        b = m.forward(x, "eval")
    assert a.data.tobytes() == b.data.tobytes()
    assert len(tape.nodes) == 0


def test_non_divisible_input_asks_for_padding():
    m = tiny(encoder_widths=[8, 8])
    with pytest.raises(ContractError, match="pad"):
        m.forward(np.zeros((1, 3, 10, 12)))
    with pytest.raises(ContractError):
        m.forward(np.zeros((1, 4, 8, 8)))
    with pytest.raises(ContractError):
        m.forward(np.zeros((1, 3, 8, 8)), "predict")


def _constant_head(m, bias):
    k, c = m.params["head.weight"].shape[:2]
    m.params["head.weight"] = Tensor(np.zeros((k, c, 1, 1)))
    m.params["head.bias"] = Tensor(np.asarray(bias, dtype=float))


def test_dominant_class_everywhere():
    m = tiny(num_classes=3)
    _constant_head(m, [0.0, 2.0, -1.0])
    maps = predict(m, np.random.default_rng(0).random((2, 3, 8, 8)))
    assert len(maps) == 2
    assert all(np.all(lm.labels == 1) for lm in maps)


def test_tie_goes_to_lower_class():
    m = tiny(num_classes=3)
    _constant_head(m, [-1.0, 0.5, 0.5])
    assert np.all(m.predict_labels(np.zeros((1, 3, 8, 8))) == 1)


@pytest.mark.parametrize("seed", range(3))
def test_predict_matches_softmax_argmax(seed):
    m = tiny(num_classes=4, seed=seed)
    x = np.random.default_rng(seed).random((2, 3, 16, 16))
    probs = softmax_channels(m.forward(x)).data
    assert np.array_equal(m.predict_labels(x), probs.argmax(axis=1))


def test_ablation_consistency_with_unit_gates(monkeypatch):
    x = np.random.default_rng(4).random((2, 3, 16, 16))
    plain = build_model(ModelConfig(encoder_widths=[8, 16], num_classes=3, attention="none", seed=9))
    full = build_model(ModelConfig(encoder_widths=[8, 16], num_classes=3, attention="cascade", seed=9))

    def ones_channel(F, p):
        return Tensor(np.ones((F.shape[0], F.shape[1], 1, 1)))

    def ones_spatial(F, p):
        return Tensor(np.ones((F.shape[0], 1) + tuple(F.shape[2:])))

    monkeypatch.setattr(attention, "channel_attention", ones_channel)
    monkeypatch.setattr(attention, "spatial_attention", ones_spatial)
    assert np.array_equal(full.forward(x).data, plain.forward(x).data)


def test_end_to_end_gradient():
    m = tiny(encoder_widths=[8], num_classes=2, seed=3)
    rng = np.random.default_rng(0)
    x = rng.random((1, 3, 16, 16))
    y = rng.integers(0, 2, size=(1, 16, 16))
    names = ["enc0.weight", "dec0.weight", "attention.channel.w1", "attention.spatial.kernel", "head.weight"]
    for name in names:
        original = m.params[name]

        def loss(w, name=name):
            m.params[name] = w
            return cross_entropy(m.forward(x, "train"), y)

        err = finite_diff_check(loss, Tensor(original.data, requires_grad=True), eps=1e-5)
        m.params[name] = original
        assert err < 1e-3, (name, err)


def test_checkpoint_round_trip(tmp_path):
    m = tiny(encoder_widths=[8, 16], num_classes=3, seed=11)
    path = tmp_path / "m.sckp"
    save_checkpoint(m, path)
    back = load_checkpoint(path, expected=m.config)
    assert back.config == m.config
    for name in m.params:
        assert back.params[name].data.tobytes() == m.params[name].data.tobytes()
    x = np.random.default_rng(0).random((2, 3, 16, 16))
    assert back.forward(x).data.tobytes() == m.forward(x).data.tobytes()
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_layout(tmp_path):
    buf = checkpoint_bytes(tiny())
    assert buf[:4] == b"SCKP"
    assert buf[4] == 1


@pytest.mark.parametrize("cut", [3, 20, -5, -1])
def test_truncated_checkpoint_rejected(cut):
    buf = checkpoint_bytes(tiny())
    with pytest.raises(CheckpointError):
        parse_checkpoint(buf[:cut])


def test_flipped_byte_rejected():
    buf = bytearray(checkpoint_bytes(tiny()))
    buf[len(buf) // 2] ^= 0xFF
    with pytest.raises(CheckpointError, match="CRC"):
        parse_checkpoint(bytes(buf))


def test_config_mismatch_rejected(tmp_path):
    path = tmp_path / "none.sckp"
    save_checkpoint(tiny("none"), path)
    with pytest.raises(CheckpointError, match="mismatch"):
        load_checkpoint(path, expected=tiny("cascade").config)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.sckp")


def test_config_text_round_trip():
    cfg = ModelConfig(in_channels=4, num_classes=5, encoder_widths=[8, 16, 32], attention="spatial_only", seed=7)
    assert ModelConfig.from_text(cfg.to_text()) == cfg
    lines = cfg.to_text().splitlines()
    assert lines == sorted(lines)
