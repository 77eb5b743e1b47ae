import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codedml.codes import (
    DecodableFamily,
    MdsCodeSpec,
    RepetitionCodeSpec,
    RowBlockSet,
    UncodedSpec,
    encode_matrix,
    format_code,
    is_decodable,
    make_code,
    mds_decode,
    mds_encode,
    parse_code,
    partition_rows,
    repetition_encode,
    vandermonde_parity,
)
from codedml.errors import IllConditionedCode, InsufficientResults, InvalidParameter


def rel_err(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b)


# partitioning


def test_partition_exact_division():
    A = np.arange(8.0).reshape(4, 2)
    b = partition_rows(A, 2)
    assert b.count == 2 and b.block_rows == 2 and b.padding_rows == 0
    np.testing.assert_array_equal(b.concat(), A)


def test_partition_with_padding():
    A = np.arange(1.0, 11.0).reshape(5, 2)
    b = partition_rows(A, 2)
    assert b.blocks.shape == (2, 3, 2) and b.padding_rows == 1
    np.testing.assert_array_equal(b[1][-1], [0.0, 0.0])
    np.testing.assert_array_equal(b.concat(), A)


def test_partition_single_block():
    A = np.random.default_rng(0).random((7, 3))
    b = partition_rows(A, 1)
    np.testing.assert_array_equal(b[0], A)


def test_partition_padding_can_exceed_block_rows():
    # q=5, k=4: blocks of 2 rows, 3 padding rows
    b = partition_rows(np.ones((5, 1)), 4)
    assert b.block_rows == 2 and b.padding_rows == 3
    assert b.concat().shape == (5, 1)


def test_partition_rejects_zero_k():
    with pytest.raises(InvalidParameter):
        partition_rows(np.ones((3, 2)), 0)


def test_rowblockset_rejects_too_much_padding():
    with pytest.raises(InvalidParameter):
        RowBlockSet(np.zeros((2, 2, 1)), padding_rows=2)


def test_non_finite_matrix_rejected():
    with pytest.raises(InvalidParameter):
        partition_rows(np.array([[1.0, np.nan]]), 1)


# mds


def test_toy_sum_parity_encode():
    code = MdsCodeSpec.vandermonde(3, 2)
    np.testing.assert_array_equal(code.generator[2], [1.0, 1.0])
    blocks = RowBlockSet(np.array([[[1.0, 2.0]], [[3.0, 4.0]]]))
    coded = mds_encode(blocks, code)
    np.testing.assert_array_equal(coded[2], [[4.0, 6.0]])
    np.testing.assert_array_equal(coded.blocks[:2], blocks.blocks)


def test_toy_decode_subtraction():
    code = MdsCodeSpec.vandermonde(3, 2)
    out = code.decode([0, 2], [np.array([3.0]), np.array([10.0])])
    np.testing.assert_allclose(out, [3.0, 7.0])


def test_systematic_decode_needs_no_solve():
    code = MdsCodeSpec.vandermonde(6, 3)
    parts = [np.array([1.0, 2.0]), np.array([3.0, 4.0]), np.array([5.0, 6.0])]
    np.testing.assert_array_equal(code.decode([2, 0, 1], [parts[2], parts[0], parts[1]]), np.arange(1.0, 7.0))


def test_round_trip_5_3():
    rng = np.random.default_rng(1)
    A = rng.random((6, 4))
    code = MdsCodeSpec.vandermonde(5, 3)
    coded = encode_matrix(A, code)
    out = code.decode([1, 3, 4], [coded[i] for i in (1, 3, 4)], coded.padding_rows)
    assert rel_err(out, A) < 1e-10


def test_matvec_12_10_random_subsets():
    rng = np.random.default_rng(2)
    A = rng.random((200, 50))
    x = rng.random(50)
    code = MdsCodeSpec.vandermonde(12, 10)
    coded = encode_matrix(A, code)
    truth = A @ x
    for _ in range(100):
        idx = rng.choice(12, 10, replace=False)
        out = code.decode(idx, [coded[i] @ x for i in idx], coded.padding_rows)
        assert rel_err(out, truth) < 1e-8


def test_every_square_minor_invertible():
    n, k = 9, 5
    G = MdsCodeSpec.vandermonde(n, k).generator
    for idx in itertools.combinations(range(n), k):
        assert abs(np.linalg.det(G[list(idx)])) > 1e-12


def test_parity_points_are_distinct_positive():
    V = vandermonde_parity(7, 3)
    pts = V[:, 1]
    assert np.all(pts > 0) and len(set(pts)) == 4 and pts[-1] == 1.0


def test_25_23_conditioned():
    code = MdsCodeSpec.vandermonde(25, 23)
    assert code.condition < 1e12


def test_all_codes_up_to_22_workers_construct():
    for n in range(2, 23):
        for k in range(1, n + 1):
            assert MdsCodeSpec.vandermonde(n, k).condition <= 1e12


def test_decode_wrong_count():
    code = MdsCodeSpec.vandermonde(5, 3)
    with pytest.raises(InsufficientResults):
        code.decode([0, 1], [np.ones(2), np.ones(2)])


def test_decode_duplicate_indices():
    code = MdsCodeSpec.vandermonde(5, 3)
    with pytest.raises(InvalidParameter):
        code.decode([0, 0, 1], [np.ones(2)] * 3)


def test_from_generator_checks():
    with pytest.raises(InvalidParameter):
        MdsCodeSpec.from_generator(np.ones((3, 2)))  # not systematic
    G = np.vstack([np.eye(2), [[1.0, 1.0], [1.0, 1.0 + 1e-15]]])
    with pytest.raises(IllConditionedCode):
        MdsCodeSpec.from_generator(G)


def test_large_k_warns():
    with pytest.warns(RuntimeWarning):
        MdsCodeSpec.vandermonde(66, 65)


def test_mds_decode_ill_conditioned_subsystem():
    # a custom generator whose parity rows are nearly parallel
    G = np.vstack([np.eye(2), [[1.0, 1.0], [1.0, 1.0 + 1e-6]]])
    spec = MdsCodeSpec.from_generator(G)
    spec_bad = MdsCodeSpec(4, 2, np.vstack([np.eye(2), [[1.0, 1.0], [1.0, 1.0 + 1e-14]]]), 0.0)
    assert rel_err(spec.decode([2, 3], [np.array([2.0]), np.array([2.0 + 1e-6])]), [1.0, 1.0]) < 1e-6
    with pytest.raises(IllConditionedCode):
        mds_decode([2, 3], [np.array([2.0]), np.array([2.0])], spec_bad)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 22).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n))), st.integers(0, 10**6))
def test_round_trip_property(nk, seed):
    n, k = nk
    rng = np.random.default_rng(seed)
    q = int(rng.integers(k, 4 * k + 3))
    A = rng.standard_normal((q, 3))
    code = MdsCodeSpec.vandermonde(n, k)
    coded = encode_matrix(A, code)
    np.testing.assert_array_equal(coded.blocks[:k], partition_rows(A, k).blocks)
    for _ in range(3):
        idx = rng.choice(n, k, replace=False)
        out = code.decode(idx, [coded[i] for i in idx], coded.padding_rows)
        assert rel_err(out, A) < 1e-8


@settings(max_examples=30, deadline=None)
@given(st.integers(23, 31).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, min(n, 30)))), st.integers(0, 10**6))
def test_conditioning_cliff_beyond_22_workers(nk, seed):
    # past n = 22 a code is either rejected or decodes with error bounded by its conditioning
    n, k = nk
    rng = np.random.default_rng(seed)
    try:
        code = MdsCodeSpec.vandermonde(n, k)
    except IllConditionedCode:
        return
    A = rng.standard_normal((2 * k + 1, 2))
    coded = encode_matrix(A, code)
    idx = rng.choice(n, k, replace=False)
    try:
        out = code.decode(idx, [coded[i] for i in idx], coded.padding_rows)
    except IllConditionedCode:
        return
    assert rel_err(out, A) < max(1e-8, code.condition * 1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_linearity_decode_commutes_with_matvec(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((13, 4))
    x = rng.standard_normal(4)
    code = MdsCodeSpec.vandermonde(7, 4)
    coded = encode_matrix(A, code)
    idx = rng.choice(7, 4, replace=False)
    left = code.decode(idx, [coded[i] @ x for i in idx], coded.padding_rows)
    right = code.decode(idx, [coded[i] for i in idx], coded.padding_rows) @ x
    np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-9)


# repetition and uncoded


def test_repetition_encode_order():
    blocks = RowBlockSet(np.array([[[1.0]], [[2.0]]]))
    out = repetition_encode(blocks, RepetitionCodeSpec(4, 2))
    np.testing.assert_array_equal(out.blocks.ravel(), [1.0, 1.0, 2.0, 2.0])


def test_repetition_identity_when_k_equals_n():
    blocks = RowBlockSet(np.arange(3.0).reshape(3, 1, 1))
    out = repetition_encode(blocks, RepetitionCodeSpec(3, 3))
    np.testing.assert_array_equal(out.blocks, blocks.blocks)


def test_repetition_requires_divisor():
    with pytest.raises(InvalidParameter):
        RepetitionCodeSpec(5, 2)


def test_repetition_decode_any_replica():
    rng = np.random.default_rng(3)
    A = rng.random((9, 2))
    code = RepetitionCodeSpec(6, 3)
    coded = encode_matrix(A, code)
    for pick in itertools.product([0, 1], repeat=3):
        idx = [2 * g + p for g, p in enumerate(pick)]
        np.testing.assert_array_equal(code.decode(idx, [coded[i] for i in idx], coded.padding_rows), A)


def test_uncoded_round_trip():
    A = np.arange(10.0).reshape(5, 2)
    code = UncodedSpec(3)
    coded = encode_matrix(A, code)
    np.testing.assert_array_equal(code.decode([2, 0, 1], [coded[2], coded[0], coded[1]], coded.padding_rows), A)
    with pytest.raises(InsufficientResults):
        code.decode([0, 1], [coded[0], coded[1]], coded.padding_rows)


# decodability


def test_is_decodable_examples():
    assert is_decodable(range(8), DecodableFamily("mds", 10, 8))
    assert not is_decodable({0, 1}, DecodableFamily("repetition", 4, 2))
    assert is_decodable({0, 2}, DecodableFamily("repetition", 4, 2))
    assert is_decodable({0, 1, 2}, DecodableFamily("uncoded", 3, 3))
    assert not is_decodable({0, 1}, DecodableFamily("uncoded", 3, 3))


@pytest.mark.parametrize("fam", [DecodableFamily("mds", 6, 3), DecodableFamily("repetition", 6, 2), DecodableFamily("repetition", 6, 3), DecodableFamily("uncoded", 4, 4)])
def test_minimality(fam):
    sets = list(fam.minimal_sets())
    assert sets
    for s in sets:
        assert s in fam
        for i in s:
            assert (s - {i}) not in fam
    # brute force: minimal sets are exactly the decodable sets with no decodable strict subset
    brute = []
    for r in range(fam.n + 1):
        for c in itertools.combinations(range(fam.n), r):
            c = frozenset(c)
            if c in fam and not any(c - {i} in fam for i in c):
                brute.append(c)
    assert set(brute) == set(sets)


def test_parse_format_round_trip():
    for text in ["mds:n=5,k=3", "repetition:n=4,k=2", "uncoded:n=4"]:
        assert format_code(parse_code(text)) == text
    for bad in ["mds:n=5,q=3", "mds:k=3", "foo:n=3", "mds:n=x"]:
        with pytest.raises(InvalidParameter):
            parse_code(bad)


def test_make_code_uncoded_rejects_k():
    with pytest.raises(InvalidParameter):
        make_code("uncoded", 4, 2)
