from embserve.hashing import MASK64, SplitMix64, fnv1a64, splitmix64


def test_fnv1a64_reference_values():
    # published FNV-1a 64-bit test vectors
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64("foobar") == 0x85944171F73967E8


def test_splitmix64_reference_stream():
    # the first outputs of the canonical splitmix64 generator seeded with 0
    rng = SplitMix64(0)
    assert [rng.next() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
    assert splitmix64(0) == 0xE220A8397B1DCDAF


def test_outputs_stay_in_64_bits():
    for x in (0, 1, MASK64, 1 << 63):
        assert 0 <= splitmix64(x) <= MASK64


def test_below_and_unit_ranges():
    rng = SplitMix64(42)
    assert all(0 <= rng.below(7) < 7 for _ in range(200))
    assert all(0.0 <= rng.unit() < 1.0 for _ in range(200))
    assert all(-1.0 <= rng.signed_unit() < 1.0 for _ in range(200))
