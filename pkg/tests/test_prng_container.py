import numpy as np
import pytest

from taskcrl import container as ct
from taskcrl.prng import PrngStream, derive_seed, prng_draw


def test_identical_keys_bitwise_equal():
    a = prng_draw(PrngStream(7, 3, 11), "standard_normal", (4, 5)).data
    b = prng_draw(PrngStream(7, 3, 11), "standard_normal", (4, 5)).data
    assert np.array_equal(a, b)


def test_streams_and_counters_are_distinct():
    a = prng_draw(PrngStream(7, 3, 0), "uniform01", 8).data
    assert not np.array_equal(a, prng_draw(PrngStream(7, 4, 0), "uniform01", 8).data)
    assert not np.array_equal(a, prng_draw(PrngStream(7, 3, 1), "uniform01", 8).data)
    assert not np.array_equal(a, prng_draw(PrngStream(8, 3, 0), "uniform01", 8).data)


def test_counter_advances():
    s = PrngStream(1, 1)
    s.generator()
    s.generator()
    assert s.counter == 2


def test_uniform_mean_monte_carlo():
    u = prng_draw(PrngStream(0, 1), "uniform01", 100_000).data
    assert abs(u.mean() - 0.5) <= 0.01


def test_normal_variance_monte_carlo():
    z = prng_draw(PrngStream(0, 2), "standard_normal", 100_000).data
    assert abs(z.var() - 1.0) <= 0.05


def test_unknown_draw_kind():
    with pytest.raises(ValueError):
        prng_draw(PrngStream(0, 1), "cauchy", 3)


def test_derive_seed_stable():
    assert derive_seed("data", 0, 1) == derive_seed("data", 0, 1)
    assert derive_seed("data", 0, 1) != derive_seed("data", 1, 0)
    assert 0 <= derive_seed(1, 2) < 2 ** 63


def test_container_round_trip(tmp_path, rng):
    arrays = {"a": rng.normal(size=(3, 4)), "b": np.arange(5.0)}
    ct.write_container(tmp_path / "x.crl", arrays, {"note": "hi"}, "dataset")
    header, back = ct.read_container(tmp_path / "x.crl")
    assert header["kind"] == "dataset" and header["meta"]["note"] == "hi"
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()


def test_truncated_file_is_corrupt(tmp_path):
    blob = ct.encode({"a": np.ones(10)}, {}, "dataset")
    with pytest.raises(ct.CorruptFileError):
        ct.decode(blob[:-3])
    with pytest.raises(ct.CorruptFileError):
        ct.decode(blob[:6])


def test_flipped_payload_byte_is_corrupt():
    blob = bytearray(ct.encode({"a": np.ones(4)}, {}, "dataset"))
    blob[-1] ^= 0xFF
    with pytest.raises(ct.CorruptFileError):
        ct.decode(bytes(blob))


def test_foreign_magic_is_format_error():
    blob = ct.encode({"a": np.ones(2)}, {}, "dataset")
    with pytest.raises(ct.FormatError):
        ct.decode(b"PK\x03\x04" + blob[4:])


def test_version_mismatch():
    blob = bytearray(ct.encode({}, {}, "dataset"))
    blob[4] = 9
    with pytest.raises(ct.VersionError):
        ct.decode(bytes(blob))


def test_canonical_hash_ignores_key_order():
    assert ct.canonical_hash({"a": 1, "b": [1, 2]}) == ct.canonical_hash({"b": [1, 2], "a": 1})
