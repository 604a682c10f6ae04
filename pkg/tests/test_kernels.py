import numpy as np
import pytest

from cryptgnn import kernels
from cryptgnn.field import MODULUS
from cryptgnn.kernels import numpy_impl
from cryptgnn.prf import SeededPrf

PRF = SeededPrf(b"\x07" * 32)


def _backends():
    out = [("numpy", numpy_impl)]
    if kernels.BACKEND == "compiled":
        from cryptgnn.kernels import _core

        out.append(("compiled", _core))
    return out


@pytest.mark.parametrize("name,impl", _backends())
def test_mul_mod_matches_python_ints(name, impl):
    a = PRF.field_matrix(2000, "a").ravel()
    b = PRF.field_matrix(2000, "b").ravel()
    got = impl.mul_mod_flat(a, b)
    for i in range(0, 2000, 197):
        assert int(got[i]) == (int(a[i]) * int(b[i])) % MODULUS


@pytest.mark.parametrize("name,impl", _backends())
def test_mul_mod_boundary_values(name, impl):
    vals = np.array([0, 1, 2, MODULUS - 1, MODULUS - 2, 1 << 60], dtype=np.uint64)
    a = np.repeat(vals, len(vals))
    b = np.tile(vals, len(vals))
    got = impl.mul_mod_flat(a, b)
    for x, y, z in zip(a, b, got):
        assert int(z) == (int(x) * int(y)) % MODULUS


@pytest.mark.parametrize("name,impl", _backends())
def test_matmul_mod_against_object_dot(name, impl):
    a = PRF.field_matrix((13, 9), "ma")
    b = PRF.field_matrix((9, 7), "mb")
    got = impl.matmul_mod(np.ascontiguousarray(a), np.ascontiguousarray(b))
    exp = (a.astype(object) @ b.astype(object)) % MODULUS
    assert np.array_equal(got, exp.astype(np.uint64))


@pytest.mark.parametrize("name,impl", _backends())
def test_inv_mod_flat(name, impl):
    a = PRF.nonzero_field_matrix(512, "inv").ravel()
    inv = impl.inv_mod_flat(np.ascontiguousarray(a))
    prod = kernels.mul_mod(a, inv)
    assert np.all(prod == 1)
    with pytest.raises(ZeroDivisionError):
        impl.inv_mod_flat(np.array([0], dtype=np.uint64))


def test_backends_agree_on_add_rotate_stack():
    stack = PRF.field_matrix((4, 6, 3), "st")
    noise = PRF.field_matrix((4, 6, 3), "no")
    shifts = PRF.integers(4, 6, "sh")
    got = kernels.add_rotate_stack(stack, noise, shifts)
    exp = numpy_impl.add_rotate_stack(stack, noise, shifts)
    assert np.array_equal(got, exp)
    # row (i) of the result is the masked row (i - shift) mod N
    r = 2
    s = int(shifts[r])
    masked = (stack[r].astype(object) + noise[r].astype(object)) % MODULUS
    for i in range(6):
        assert np.array_equal(got[r, i], masked[(i - s) % 6].astype(np.uint64))


def test_mul_mod_broadcasting():
    col = PRF.field_matrix((5, 1), "c")
    row = PRF.field_matrix((1, 4), "r")
    out = kernels.mul_mod(col, row)
    assert out.shape == (5, 4)
    assert int(out[2, 3]) == (int(col[2, 0]) * int(row[0, 3])) % MODULUS
