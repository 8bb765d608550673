import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _reference_rng import Ref, reference_sample, reference_topology
from mcra.channel import (
    ChannelInstance, Dataset, NetworkConfig, generate_dataset, read_dataset, sample_instance,
    sample_topology, write_dataset,
)
from mcra.errors import ContractViolation, CorruptionError, FormatError, TruncationError
from mcra.rng import LockstepXoshiro, Xoshiro256pp, splitmix64


def test_xoshiro_published_vectors():
    # reference outputs of xoshiro256++ seeded with state {1, 2, 3, 4}
    g = Xoshiro256pp([1, 2, 3, 4])
    assert [g.next_u64() for _ in range(3)] == [41943041, 58720359, 3588806011781223]
    assert splitmix64(0)[1] == 0xE220A8397B1DCDAF


def test_lockstep_matches_scalar_streams():
    gens = [Xoshiro256pp.from_seed(99, k) for k in range(5)]
    lock = LockstepXoshiro.from_scalar([Xoshiro256pp.from_seed(99, k) for k in range(5)])
    u = lock.uniforms(50)
    expected = np.array([[g.uniform() for _ in range(50)] for g in gens])
    assert np.array_equal(u, expected)


def test_scalar_stream_matches_reference():
    a, b = Xoshiro256pp.from_seed(42, 3), Ref(42, 3)
    assert [a.next_u64() for _ in range(100)] == [b.u64() for _ in range(100)]


def test_topology_seed_42_matches_reference():
    cfg = NetworkConfig(D=10, M=1, seed=42)
    topo = sample_topology(cfg, Xoshiro256pp.from_seed(42, 0))
    ref, _ = reference_topology(42, 0, 10)
    np.testing.assert_allclose(topo.dist, np.array(ref), rtol=1e-14, atol=0)


def test_dataset_matches_reference_pipeline():
    cfg = NetworkConfig(D=4, M=3, seed=7)
    ds = generate_dataset(cfg, 3)
    for k in range(3):
        _, g = reference_sample(7, k, 4, 3)
        np.testing.assert_allclose(ds.gains[k], np.array(g), rtol=1e-13, atol=0)


def test_scalar_sample_instance_matches_batch_generator():
    cfg = NetworkConfig(D=5, M=2, seed=11)
    stream = Xoshiro256pp.from_seed(11, 0)
    inst = sample_instance(cfg, sample_topology(cfg, stream), stream)
    np.testing.assert_allclose(inst.gains, generate_dataset(cfg, 1).gains[0], rtol=1e-13)


def test_same_seed_same_topology():
    cfg = NetworkConfig(D=8, M=1, seed=5)
    t1 = sample_topology(cfg, Xoshiro256pp.from_seed(5))
    t2 = sample_topology(cfg, Xoshiro256pp.from_seed(5))
    assert np.array_equal(t1.dist, t2.dist) and np.array_equal(t1.tx, t2.tx)


def test_single_pair_distance_in_range():
    cfg = NetworkConfig(D=1, M=1, seed=123)
    d = sample_topology(cfg, Xoshiro256pp.from_seed(123)).dist
    assert d.shape == (1, 1) and 2.0 <= d[0, 0] <= 10.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), D=st.integers(1, 12))
def test_topology_invariants(seed, D):
    cfg = NetworkConfig(D=D, M=1, seed=seed)
    topo = sample_topology(cfg, Xoshiro256pp.from_seed(seed))
    diag = np.diag(topo.dist)
    assert np.all(diag >= cfg.d_min) and np.all(diag <= cfg.d_max)
    for pts in (topo.tx, topo.rx):
        assert np.all(pts >= 0) and np.all(pts <= cfg.area_side)
    assert np.all(topo.dist > 0)


def test_unit_distance_unit_fading_gives_unit_gain():
    from mcra.channel import path_gain
    assert path_gain(np.array(1.0), 3.0) == 1.0
    # |f| = 1 when x^2 + y^2 = 2
    assert path_gain(np.array(1.0), 3.0) * math.sqrt(0.5 * (1.0 + 1.0)) == 1.0


def test_mean_square_gain_matches_path_loss():
    # 10^5 fading draws at a fixed 5 m distance; E|f|^2 = 1
    d, gamma = 5.0, 3.0
    lock = LockstepXoshiro.from_scalar([Xoshiro256pp.from_seed(2024, k) for k in range(1000)])
    u = lock.uniforms(200).reshape(1000, 100, 2)
    from mcra.rng import box_muller
    x, y = box_muller(u[..., 0], u[..., 1])
    g = math.sqrt(d ** -gamma) * np.sqrt(0.5 * (x * x + y * y))
    assert g.size == 100_000
    assert abs(np.mean(g ** 2) / d ** -gamma - 1) < 0.02


def test_generation_is_deterministic(tmp_path):
    cfg = NetworkConfig(D=6, M=2, seed=77)
    write_dataset(generate_dataset(cfg, 20), tmp_path / "a.mcra")
    write_dataset(generate_dataset(cfg, 20), tmp_path / "b.mcra")
    assert (tmp_path / "a.mcra").read_bytes() == (tmp_path / "b.mcra").read_bytes()


def test_round_trip_is_bit_exact(tmp_path):
    ds = generate_dataset(NetworkConfig(D=3, M=2, seed=1, gamma=3.5), 4)
    write_dataset(ds, tmp_path / "x.mcra")
    back = read_dataset(tmp_path / "x.mcra")
    assert back.config == ds.config
    assert back.gains.tobytes() == ds.gains.tobytes()


def test_weighted_config_round_trips(tmp_path):
    cfg = NetworkConfig(D=2, M=1, weights=(0.5, 2.0))
    write_dataset(generate_dataset(cfg, 1), tmp_path / "w.mcra")
    assert read_dataset(tmp_path / "w.mcra").config.weights == (0.5, 2.0)


def test_empty_dataset_has_no_payload(tmp_path):
    ds = generate_dataset(NetworkConfig(D=3, M=2), 0)
    write_dataset(ds, tmp_path / "e.mcra")
    raw = (tmp_path / "e.mcra").read_bytes()
    assert raw.endswith(b"\n") and b'"num_samples":0' in raw
    assert len(read_dataset(tmp_path / "e.mcra")) == 0


def test_payload_size_and_layout(tmp_path):
    g = np.arange(4, dtype=float).reshape(1, 1, 2, 2)
    write_dataset(Dataset(NetworkConfig(D=2, M=1), g), tmp_path / "s.mcra")
    raw = (tmp_path / "s.mcra").read_bytes()
    header_end = raw.index(b"\n", 6)
    payload = raw[header_end + 1:]
    assert raw[:6] == b"MCRA1\n"
    assert len(payload) == 32
    assert payload == np.array([0.0, 1.0, 2.0, 3.0], dtype="<f8").tobytes()


def test_header_field_order(tmp_path):
    write_dataset(generate_dataset(NetworkConfig(D=2, M=1, seed=3), 1), tmp_path / "h.mcra")
    header = (tmp_path / "h.mcra").read_bytes().split(b"\n")[1].decode()
    keys = [kv.split(":")[0].strip('"{') for kv in header.split(",")]
    assert keys == ["version", "D", "M", "num_samples", "seed", "area_side", "d_min", "d_max",
                    "gamma", "noise_power", "p_max"]


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.mcra"
    write_dataset(generate_dataset(NetworkConfig(D=2, M=1), 1), path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(FormatError):
        read_dataset(path)


def test_short_payload(tmp_path):
    path = tmp_path / "short.mcra"
    write_dataset(generate_dataset(NetworkConfig(D=2, M=1), 2), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(TruncationError):
        read_dataset(path)


def test_non_finite_payload(tmp_path):
    path = tmp_path / "nan.mcra"
    write_dataset(generate_dataset(NetworkConfig(D=2, M=1), 1), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8] + np.array([np.nan], dtype="<f8").tobytes())
    with pytest.raises(CorruptionError):
        read_dataset(path)


def test_valid_file_satisfies_instance_invariants(tmp_path):
    path = tmp_path / "ok.mcra"
    write_dataset(generate_dataset(NetworkConfig(D=4, M=3, seed=9), 5), path)
    ds = read_dataset(path)
    for inst in ds.samples:
        assert isinstance(inst, ChannelInstance)
        assert inst.gains.size == 3 * 4 * 4
        assert np.all(np.isfinite(inst.gains)) and np.all(inst.gains >= 0)


def test_unwritable_destination_names_path(tmp_path):
    target = tmp_path / "missing" / "x.mcra"
    with pytest.raises(OSError, match="missing"):
        write_dataset(generate_dataset(NetworkConfig(D=1, M=1), 1), target)


@pytest.mark.parametrize("kwargs", [
    dict(D=0, M=1), dict(D=1, M=0), dict(D=1, M=1, d_min=5.0, d_max=2.0),
    dict(D=1, M=1, d_max=200.0), dict(D=1, M=1, noise_power=0.0), dict(D=1, M=1, p_max=-1.0),
    dict(D=2, M=1, weights=(1.0, -1.0)),
])
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ContractViolation):
        NetworkConfig(**kwargs)
