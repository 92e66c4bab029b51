import math

import pytest
from hypothesis import given, strategies as st

from ddcmnet.config import (ConfigError, default_config, parse_config, preset_names, preset_values,
                            render_config)


def test_empty_text_is_isprs_default():
    assert parse_config("") == default_config("isprs")
    assert parse_config("# only a comment\n\n") == default_config()


def test_isprs_preset_values():
    c = default_config("isprs")
    net = c.network
    assert net.low_level.rates == (1, 2, 3, 5, 7, 9) and net.low_level.out_channels == 3
    assert [d.rates for d in net.high_level] == [(1, 2, 3, 4), (1,)]
    assert [d.out_channels for d in net.high_level] == [36, 18]
    assert c.schedule.kind == "step" and c.schedule.step_factor == 0.85 and c.schedule.step_every == 15
    assert c.train.patch == 256 and c.train.batch == 5
    assert c.optimizer.lr == pytest.approx(8.5e-5 / math.sqrt(2))
    assert c.optimizer.weight_decay == 2e-5
    assert c.infer.window == 448 and c.infer.stride == 100 and c.infer.tta


def test_deepglobe_preset_values():
    c = default_config("deepglobe")
    net = c.network
    assert net.low_level.rates == (1, 2, 4, 8, 16, 32) and net.low_level.stride == 2
    assert [(d.out_channels, d.groups, d.stride) for d in net.high_level] == [(64, 2, 2), (32, 2, 2)]
    assert c.train.patch == 765 and c.train.patches == 4000
    assert c.schedule.kind == "multistep" and c.schedule.multistep_factor == 0.56
    assert c.schedule.multistep_epochs == (4, 8, 16, 24, 32, 96, 128)
    assert c.network.num_classes == 7
    assert default_config("ddcm-ser50") == c


def test_overlays():
    base = default_config("isprs")
    nd = default_config("isprs+no-dilation").network.effective()
    assert all(r == 1 for d in (nd.low_level,) + nd.high_level for r in d.rates)
    assert default_config("isprs+no-ll-encoder").network.effective().high_level[-1].out_channels == 21
    s2 = default_config("toy+s2").network
    assert s2.low_level.stride == 2 and all(d.stride == 2 for d in s2.high_level)
    assert default_config("toy+dynamic").network.low_level.block_stride(3) == 4
    assert base != default_config("isprs+s3")
    with pytest.raises(ConfigError):
        preset_values("isprs+nope")
    with pytest.raises(ConfigError):
        preset_values("nope")
    assert "toy" in preset_names()


def test_parse_values_and_lists():
    c = parse_config("encoder.rates = 1,2,3,5,7,9\ntrain.lr = 1e-3  # faster\ndecoder1.width = 12\n"
                     "train.ignore_id = none\neval.exclude = none\n", preset="toy")
    assert c["encoder.rates"] == (1, 2, 3, 5, 7, 9)
    assert c.optimizer.lr == 1e-3
    assert c.network.high_level[0].width == 12
    assert c.train.ignore_id is None and c.exclude == ()


@pytest.mark.parametrize("text,where", [
    ("train.weight_decay = banana", "line 1"),
    ("\ntrain.epochs = 0", "line 2"),
    ("nonsense", "line 1"),
    ("train.nope = 3", "line 1"),
    ("train.epochs = 3\ntrain.epochs = 4", "line 2"),
    ("decoder3.out = 4", "line 1"),
    ("encoder.kernel = 2", "line 1"),
    ("train.amsgrad = maybe", "line 1"),
])
def test_parse_errors_name_the_line(text, where):
    with pytest.raises(ConfigError, match=where):
        parse_config(text)


def test_type_error_mentions_key():
    with pytest.raises(ConfigError, match="train.weight_decay"):
        parse_config("train.weight_decay = banana")


def test_cross_key_validation():
    with pytest.raises(ConfigError):
        parse_config("data.split = 0.5,0.2")
    with pytest.raises(ConfigError):
        parse_config("network.decoder_upsample = 3", preset="toy")
    with pytest.raises(ConfigError):
        default_config("toy").replace(network__bogus=1)


def test_decoder_count_adds_and_drops_sections():
    c = parse_config("network.decoders = 3\ndecoder3.out = 8", preset="toy")
    assert len(c.network.high_level) == 3 and c.network.high_level[2].out_channels == 8
    c = parse_config("network.decoders = 1", preset="toy")
    assert "decoder2.out" not in c.values


@pytest.mark.parametrize("preset", ["isprs", "deepglobe", "toy", "isprs+no-ll-encoder", "toy+dynamic"])
def test_render_round_trip(preset):
    c = default_config(preset)
    assert parse_config(render_config(c)) == c
    assert parse_config(render_config(c, annotate=True)) == c


def test_annotations():
    text = render_config(default_config("isprs"), annotate=True)
    line = next(l for l in text.splitlines() if l.startswith("encoder.rates"))
    assert "[published]" in line
    toy = render_config(default_config("toy"), annotate=True)
    assert "[published]" not in next(l for l in toy.splitlines() if l.startswith("train.lr"))


@given(st.floats(1e-9, 10.0), st.integers(1, 500), st.lists(st.integers(1, 40), min_size=1, max_size=6))
def test_round_trip_property(lr, epochs, rates):
    c = default_config("toy").replace(train__lr=lr, train__epochs=epochs, encoder__rates=tuple(rates))
    assert parse_config(render_config(c)) == c
