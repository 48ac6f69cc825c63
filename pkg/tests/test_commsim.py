import json

import numpy as np
import pytest

from commopt.commsim import (COORDINATOR, CommLedger, Message, ModelViolation, Network, Overflow,
                             RowPartitionedMatrix, decode_fixed, encode_fixed, even_partition,
                             load_instance, save_instance, write_ledger_report)


def _nearest_by_scan(v, L):
    grid = np.arange(-4 * 2 ** L, 4 * 2 ** L + 1)
    return int(grid[np.argmin(np.abs(grid * 2.0 ** -L - v))])


@pytest.mark.parametrize("v,num", [(0.0, 0), (1.0, 16), (0.1, 2)])
def test_encode_fixed_examples(v, num):
    assert encode_fixed(v, 4).numerator == num


def test_encode_fixed_is_nearest_grid_point():
    rng = np.random.default_rng(0)
    for v in rng.uniform(-3, 3, 200):
        assert encode_fixed(v, 4).numerator == _nearest_by_scan(v, 4)


def test_encode_fixed_round_trip_and_overflow():
    x = encode_fixed(-2.375, 8)
    assert decode_fixed(x.bits(), 8) == x
    assert len(x.bits()) == 17
    with pytest.raises(Overflow):
        encode_fixed(2.0 ** 9, 8)


def test_scalar_and_vector_charges():
    net = Network(1)
    net.upload(0, Message.scalar("a", 0.5, 8))
    assert net.ledger.total_bits == 17
    net2 = Network(1)
    for v in np.linspace(-1, 1, 10):
        net2.upload(0, Message.scalar("v", v, 8))
    assert net2.ledger.total_bits == 170


def test_broadcast_charges():
    msg = Message.raw("m", None, 10)
    net = Network(4)
    net.broadcast(msg)
    assert net.ledger.total_bits == 40
    bb = Network(4, mode="blackboard")
    bb.broadcast(msg)
    bb.download(1, msg)
    assert bb.ledger.total_bits == 0
    empty = Network(0)
    empty.broadcast(msg)
    assert empty.ledger.total_bits == 0


def test_round_barrier_counts_and_attribution():
    net = Network(2)
    assert net.ledger.rounds == 0
    net.upload(0, Message.raw("a", None, 3))
    for _ in range(3):
        net.round_barrier()
    net.upload(1, Message.raw("b", None, 5))
    assert net.ledger.rounds == 3
    assert [r.round for r in net.ledger.per_step] == [0, 3]


def test_model_violations():
    net = Network(2, sever_private=True)
    with pytest.raises(ModelViolation):
        net.send(0, 1, Message.raw("x", None, 1))
    with pytest.raises(ModelViolation):
        net.send(COORDINATOR, 5, Message.raw("x", None, 1))
    with pytest.raises(ModelViolation):
        net.private_rng(0, "t", requester=COORDINATOR)


def test_serialize_length_matches_bit_size():
    rng = np.random.default_rng(1)
    msgs = [Message.scalar("s", 0.3, 8), Message.vector("v", rng.standard_normal(5), 8),
            Message.matrix("m", rng.standard_normal((3, 4)), 6), Message.indices("i", [0, 7, 300]),
            Message.varint("k", -12), Message.varints("ks", [3, -4, 0]),
            Message.float64("f", rng.standard_normal(4)), Message.fitted("x", 100 * rng.random(6), 4)]
    for m in msgs:
        assert len(m.serialize()) == m.bit_size()


def test_rng_streams_are_reproducible():
    a, b = Network(3, seed=7), Network(3, seed=7)
    assert np.array_equal(a.rng("t", 1).random(4), b.rng("t", 1).random(4))
    assert not np.array_equal(a.rng("t", 1).random(4), b.rng("t", 2).random(4))
    # a second request with the same key gives a fresh stream
    assert not np.array_equal(a.rng("u").random(4), a.rng("u").random(4))


def test_ledger_additivity_and_fingerprint():
    def run():
        net = Network(3, seed=2)
        for m in range(3):
            net.upload(m, Message.vector("v", np.arange(m + 1), 4))
        net.round_barrier()
        net.broadcast(Message.scalar("s", 1.5, 4))
        return net.ledger
    a, b = run(), run()
    assert a.check_additivity()
    assert a.fingerprint() == b.fingerprint()
    assert a.total_bits == a.total_up + a.total_down


def test_row_partitioned_matrix():
    A = np.arange(12.0).reshape(6, 2) / 3
    rpm = RowPartitionedMatrix.from_dense(A, even_partition(6, 4), 8)
    assert rpm.partition == [2, 2, 1, 1]
    assert rpm.n == 6 and rpm.d == 2 and rpm.s == 4
    assert np.allclose(rpm.dense(), A, atol=2 ** -9)
    assert [v.size for v in rpm.split_vector(np.arange(6))] == [2, 2, 1, 1]
    with pytest.raises(ValueError):
        RowPartitionedMatrix.from_dense(A, [2, 2], 8)


def test_instance_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    rpm = RowPartitionedMatrix.from_dense(rng.standard_normal((10, 3)), [5, 5], 8)
    b = rng.standard_normal(10)
    path = str(tmp_path / "inst.json")
    doc = save_instance(path, rpm, "random", {"note": 1}, {"b": b})
    assert len(doc["entries"]) == 30
    A2, header, vecs = load_instance(path, ("b",))
    assert np.array_equal(A2.dense(), rpm.dense())
    assert header["kind"] == "random" and header["note"] == 1
    assert np.allclose(vecs["b"], b, atol=2 ** -9)


def test_ledger_report_file(tmp_path):
    net = Network(2)
    net.upload(0, Message.raw("a", None, 11))
    path = tmp_path / "ledger.json"
    write_ledger_report(str(path), net.ledger, "demo")
    rep = json.loads(path.read_text())
    assert rep["bits_up"] == 11 and rep["bits_down"] == 0 and len(rep["per_step"]) == 1
