import numpy as np
import pytest

from labelreg.autoencoder import AutoencoderConfig, build_autoencoder
from labelreg.core import Tensor
from labelreg.data import SyntheticSpec, synthetic_dataset
from labelreg.errors import ConfigError
from labelreg.regularizer import (
    AUX_PREFIX,
    RegScheme,
    Schedule,
    attach,
    attach_decoder_aux,
    combined_loss,
    export_model,
    train_segmenter,
)
from labelreg.segnet import SegNetConfig, build_segnet

RES = (16, 16)


def _seg(seed=0, **kw):
    return build_segnet(SegNetConfig("hyper_tiny", input_resolution=RES, channels=[4, 6, 8, 8], **kw), seed)


def _ae(seed=1):
    return build_autoencoder(AutoencoderConfig(pool_stages=3, encoder_channels=[4, 4, 6], input_resolution=RES), seed)


def _data(n=6):
    spec = SyntheticSpec(resolution=RES, train_size=n, val_size=3)
    return synthetic_dataset(spec, "train"), synthetic_dataset(spec, "val")


SHORT = Schedule(epochs_hi=2, epochs_lo=1, lr_hi=1e-2, lr_lo=1e-3, batch_size=4)


def test_scheme_defaults_and_validation():
    assert RegScheme("decoder_aux").lam == 0.5
    assert RegScheme("decoder_aux", aux_loss="mse").lam == 1.0
    assert not RegScheme().active
    with pytest.raises(ConfigError):
        RegScheme("encoder_pred", aux_loss="cross_entropy")
    with pytest.raises(ConfigError):
        RegScheme("decoder_aux", lam=-1)
    with pytest.raises(ConfigError):
        RegScheme("decoder_aux", decoder_mode="thawed")


def test_contract_violations():
    ae = _ae()
    seg = build_segnet(SegNetConfig("hyper_tiny", input_resolution=RES, channels=[4, 4, 4]), 0)
    with pytest.raises(ConfigError, match="penultimate-resolution contract"):
        attach_decoder_aux(seg, ae)
    with pytest.raises(ConfigError, match="classes"):
        attach_decoder_aux(_seg(num_classes=4), ae)
    with pytest.raises(ConfigError, match="autoencoder"):
        attach(_seg(), None, RegScheme("decoder_aux"))


def test_decoder_modes():
    ae = _ae()
    frozen = attach(_seg(), ae, RegScheme("decoder_aux", decoder_mode="frozen"), 0)
    unfrozen = attach(_seg(), ae, RegScheme("decoder_aux", decoder_mode="unfrozen"), 0)
    rand = attach(_seg(), ae, RegScheme("decoder_aux", decoder_mode="random_init"), 0)
    names = frozen.decoder_names()
    assert names and set(frozen.params.frozen) == set(names)
    assert not unfrozen.params.frozen and not rand.params.frozen
    for n in names:
        assert np.array_equal(frozen.params[n].data, ae.params[n].data)
        assert frozen.params[n] is not ae.params[n]
    assert any(not np.array_equal(rand.params[n].data, ae.params[n].data) for n in names)


def test_aux_output_shapes():
    ae = _ae()
    x = Tensor(np.random.default_rng(0).random((2, 3) + RES, dtype=np.float32))
    model = attach(_seg(), ae, RegScheme("decoder_aux"), 0)
    out, aux = model.forward(x)
    assert aux.shape == out.logits.shape
    enc = attach(_seg(), ae, RegScheme("encoder_pred", aux_loss="mse"), 0)
    out, aux = enc.forward(x)
    target = enc.encoder_target(np.zeros((2,) + RES, np.uint8))
    assert aux.shape == target.shape == (2, 4 + 6) + RES


def test_combined_loss_invariants():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(2, 6, 4, 4)).astype(np.float32))
    aux = Tensor(rng.normal(size=(2, 6, 4, 4)).astype(np.float32))
    label = rng.integers(0, 6, size=(2, 4, 4))
    base = combined_loss(logits, None, label, RegScheme())
    assert base.aux_loss == 0 and base.total == base.primary_loss
    zero = combined_loss(logits, aux, label, RegScheme("decoder_aux", lam=0.0))
    assert zero.total == zero.primary_loss == base.primary_loss and zero.aux_loss > 0
    two = combined_loss(logits, aux, label, RegScheme("decoder_aux", lam=2.0))
    assert two.total == pytest.approx(two.primary_loss + 2 * two.aux_loss, rel=1e-6)
    mse = combined_loss(logits, aux, label, RegScheme("decoder_aux", aux_loss="mse"))
    assert mse.aux_loss >= 0
    with pytest.raises(ConfigError):
        combined_loss(logits, aux, label, RegScheme())
    with pytest.raises(ConfigError):
        combined_loss(logits, None, label, RegScheme("decoder_aux"))


def test_frozen_decoder_untouched_and_export_clean():
    train, val = _data()
    ae = _ae()
    before = {n: t.data.tobytes() for n, t in ae.decoder_params().items()}
    model = attach(_seg(), ae, RegScheme("decoder_aux", decoder_mode="frozen"), np.random.default_rng(0))
    res = train_segmenter(model, train, SHORT, np.random.default_rng(1), val=val)
    for n, raw in before.items():
        assert model.params[n].data.tobytes() == raw == ae.params[n].data.tobytes()
    exported = export_model(res.model)
    assert not [n for n in exported.params if n.startswith((AUX_PREFIX, "decoder."))]
    assert set(exported.params) == set(_seg().params)
    assert res.final("val") is not None and len(res.digests) == SHORT.epochs


def test_unfrozen_decoder_moves():
    train, _ = _data()
    ae = _ae()
    model = attach(_seg(), ae, RegScheme("decoder_aux", decoder_mode="unfrozen"), np.random.default_rng(0))
    train_segmenter(model, train, SHORT, np.random.default_rng(1))
    assert any(model.params[n].data.tobytes() != ae.params[n].data.tobytes() for n in model.decoder_names())


def test_lambda_zero_matches_baseline_bitwise():
    train, _ = _data()
    ae = _ae()
    base = train_segmenter(attach(_seg(3), ae, RegScheme()), train, SHORT, np.random.default_rng(5))
    zero = train_segmenter(attach(_seg(3), ae, RegScheme("decoder_aux", lam=0.0), np.random.default_rng(9)),
                           train, SHORT, np.random.default_rng(5))
    assert base.digests == zero.digests
    half = train_segmenter(attach(_seg(3), ae, RegScheme("decoder_aux", lam=0.5), np.random.default_rng(9)),
                           train, SHORT, np.random.default_rng(5))
    assert half.digests[-1] != base.digests[-1]


def test_training_is_deterministic():
    train, val = _data()
    ae = _ae()
    runs = [train_segmenter(attach(_seg(2), ae, RegScheme("encoder_pred", aux_loss="mse"), np.random.default_rng(0)),
                            train, SHORT, np.random.default_rng(4), val=val) for _ in range(2)]
    assert runs[0].digests == runs[1].digests
    assert runs[0].history == runs[1].history
