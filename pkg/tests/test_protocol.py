import numpy as np
import pytest

from semharq.channel import Channel
from semharq.channel import empirical_snr_db
from semharq.codec import adaptive_mask
from semharq.codec import encode
from semharq.codec import joint_decode
from semharq.codec import power_normalize
from semharq.errors import ProtocolError
from semharq.functions import psnr
from semharq.harq.protocol import RECORD_COLUMNS
from semharq.harq.protocol import HarqSystem
from semharq.harq.protocol import initial_round
from semharq.harq.protocol import retransmission_round
from semharq.harq.protocol import run_transmission
from semharq.harq.retx import RetxBundle
from semharq.harq.retx import refine_features
from semharq.harq.retx import second_joint_decode
from semharq.policies import AlwaysRetransmit
from semharq.policies import NeverRetransmit
from semharq.policies import OraclePolicy
from semharq.training import load_trained


def transmit(system, image, policy, seed=0, snr=1.0):
    return run_transmission(system, image, snr, 0.25, 0.5, policy, np.random.default_rng(seed))


def test_no_retransmission(tiny_system, tiny_image):
    record = transmit(tiny_system, tiny_image, NeverRetransmit())
    assert record.action == 0
    assert record.K_mask == 2 and record.k == 2
    assert record.symbols_sent == 4
    assert record.score_r2 is None and record.reconstruction2 is None
    assert record.final_score == record.score_r1
    assert [f.role for f in record.frames] == ["jscc", "check"]
    assert record.reward in (0.5, -5.0)


def test_retransmission(tiny_system, tiny_image):
    record = transmit(tiny_system, tiny_image, AlwaysRetransmit())
    assert record.action == 1
    assert record.K2_mask == 4
    assert record.symbols_sent == 2 + 2 + 4 + 2
    assert [(f.round_number, f.role) for f in record.frames] == [
        (1, "jscc"), (1, "check"), (2, "nak"), (2, "jscc"), (2, "check"),
    ]
    assert record.final_score == record.score_r2
    assert record.final_psnr == record.psnr_r2
    assert 0.0 < record.estimate_r2 < 1.0
    assert record.reward in (10.0, -0.5, -1.0)


def test_inactive_symbols_arrive_as_zeros(tiny_system, tiny_image):
    record = transmit(tiny_system, tiny_image, AlwaysRetransmit())
    assert not np.any(record.z_received[record.K_mask:])
    assert not np.any(record.z2_received[record.K2_mask:])


def test_codewords_are_float32_on_the_wire(tiny_system, tiny_image):
    record = transmit(tiny_system, tiny_image, NeverRetransmit())
    np.testing.assert_array_equal(record.z_sent, record.z_sent.astype(np.float32))
    np.testing.assert_array_equal(record.check_sent, record.check_sent.astype(np.float32))


def test_policies_share_round_one(tiny_system, tiny_image):
    a = transmit(tiny_system, tiny_image, NeverRetransmit(), seed=4)
    b = transmit(tiny_system, tiny_image, AlwaysRetransmit(), seed=4)
    np.testing.assert_array_equal(a.z_received, b.z_received)
    np.testing.assert_array_equal(a.check_received, b.check_received)
    assert a.score_r1 == b.score_r1 and a.estimate == b.estimate


def test_transmission_is_deterministic(tiny_system, tiny_image):
    a = transmit(tiny_system, tiny_image, AlwaysRetransmit(), seed=9)
    b = transmit(tiny_system, tiny_image, AlwaysRetransmit(), seed=9)
    assert a.to_row() == b.to_row()
    np.testing.assert_array_equal(a.reconstruction2, b.reconstruction2)


def test_oracle_retransmits_failures_only(tiny_system, tiny_image):
    for seed in range(10):
        record = transmit(tiny_system, tiny_image, OraclePolicy(), seed=seed)
        assert record.action == int(record.score_r1 > tiny_system.threshold)


def test_record_row_columns(tiny_system, tiny_image):
    row = transmit(tiny_system, tiny_image, NeverRetransmit()).to_row()
    assert tuple(row) == RECORD_COLUMNS
    assert np.isnan(row["score_r2"]) and row["K2_mask"] == 0


def test_record_check_detects_inconsistency(tiny_system, tiny_image):
    record = transmit(tiny_system, tiny_image, NeverRetransmit())
    record.action = 1
    with pytest.raises(ProtocolError, match="without round-two"):
        record.check()
    record.action = 0
    record.symbols_sent += 1
    with pytest.raises(ProtocolError, match="symbols"):
        record.check()


def test_retransmission_needs_retained_features(tiny_system, tiny_image):
    first = initial_round(
        tiny_system.codec, tiny_system.channel, tiny_image, 0.25, 1.0, np.random.default_rng(0),
        projector=tiny_system.projector,
    )
    with pytest.raises(ProtocolError, match="no retained features"):
        retransmission_round(
            tiny_system.codec, tiny_system.retx, tiny_system.channel, tiny_image, None, first.estimate,
            0.5, 1.0, np.random.default_rng(1), record=first.record, projector=tiny_system.projector,
        )


def test_system_rejects_mismatched_modules(tiny_system):
    retx = RetxBundle.build(6, 2, (1, 4, 4), width=16, depth=2)
    with pytest.raises(ProtocolError, match="K=8.*K=6"):
        HarqSystem(tiny_system.codec, retx, Channel("awgn"), tiny_system.projector, 0.3)


def test_rayleigh_link_records_gains(tiny_system, tiny_image):
    system = HarqSystem(
        tiny_system.codec, tiny_system.retx, Channel("rayleigh"), tiny_system.projector, 0.3
    )
    record = transmit(system, tiny_image, AlwaysRetransmit())
    assert record.gain > 0.0 and record.gain2 > 0.0
    assert record.gain != record.gain2


def test_codec_mismatch_with_image_size(tiny_system):
    with pytest.raises(ValueError):
        transmit(tiny_system, np.zeros(25), NeverRetransmit())


@pytest.fixture(scope="module")
def trained_link(trained_run):
    config, splits, _ = trained_run
    system, _ = load_trained(config)
    return system, splits["test"].images


def test_initial_round_noiseless_limit(trained_link):
    system, images = trained_link
    sent, received = [], []
    for i in range(5000):
        record = initial_round(
            system.codec, system.channel, images[i % len(images)], 1.0, 99.0,
            np.random.default_rng([9, i]), projector=system.projector,
        ).record
        sent += [record.z_sent, record.check_sent]
        received += [record.z_received, record.check_received]
    assert empirical_snr_db(np.concatenate(sent), np.concatenate(received)) == pytest.approx(99.0, abs=0.1)

    for i, img in enumerate(images[:10]):
        record = initial_round(
            system.codec, system.channel, img, 0.25, 99.0, np.random.default_rng(i), projector=system.projector,
        ).record
        clean = joint_decode(system.codec, record.z_sent, record.check_sent, 99.0).data[0]
        np.testing.assert_allclose(record.reconstruction, clean, atol=1e-3)
        assert psnr(img, record.reconstruction) == pytest.approx(psnr(img, clean), abs=0.1)


def test_retransmission_noiseless_limit(trained_link):
    system, images = trained_link
    for i, img in enumerate(images[:10]):
        record = run_transmission(system, img, 99.0, 0.25, 0.5, AlwaysRetransmit(), np.random.default_rng(i))
        x = encode(system.codec, img.vector, 0.25, 99.0).data
        masked = adaptive_mask(refine_features(system.retx, x, 0.5, 99.0), 0.5)
        z2, _ = power_normalize(masked.values, masked.active_count)
        np.testing.assert_allclose(record.z2_sent, z2.data[0], atol=1e-6)
        clean = second_joint_decode(
            system.retx, record.z_sent, record.check_sent, record.z2_sent, record.check2_sent, 99.0
        ).data[0]
        np.testing.assert_allclose(record.reconstruction2, clean, atol=1e-3)
