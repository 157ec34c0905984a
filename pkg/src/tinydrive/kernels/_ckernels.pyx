# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled int8 kernels.

``*_ref`` are plain scalar loops over the weight tensor.  ``conv1d_fast`` keeps
four weight taps in registers and sweeps them across a whole output row, and
``fc_fast`` runs a 4-lane unrolled dot product with a scalar tail; both are the
host analogue of packed 4x8-bit MAC instructions.  All kernels accumulate in
int32 and requantize identically.
"""

import numpy as np

cimport numpy as cnp
from libc.stdint cimport int8_t, int16_t, int32_t, int64_t, uint8_t
from libc.stdlib cimport malloc, free

BACKEND = "compiled"


cdef inline int8_t _requant(int32_t acc, int shift, bint relu) noexcept nogil:
    cdef int64_t v = acc
    cdef int64_t half
    if shift > 0:
        half = (<int64_t>1) << (shift - 1)
        if v >= 0:
            v = (v + half) >> shift
        else:
            v = -((-v + half) >> shift)
    if v > 127:
        v = 127
    elif v < -128:
        v = -128
    if relu and v < 0:
        v = 0
    return <int8_t>v


cdef inline int32_t _dot4(const int16_t* a, const int16_t* b, Py_ssize_t n) noexcept nogil:
    cdef int32_t s0 = 0, s1 = 0, s2 = 0, s3 = 0
    cdef Py_ssize_t j = 0
    cdef Py_ssize_t n4 = n - (n % 4)
    while j < n4:
        s0 += <int32_t>a[j] * <int32_t>b[j]
        s1 += <int32_t>a[j + 1] * <int32_t>b[j + 1]
        s2 += <int32_t>a[j + 2] * <int32_t>b[j + 2]
        s3 += <int32_t>a[j + 3] * <int32_t>b[j + 3]
        j += 4
    while j < n:
        s0 += <int32_t>a[j] * <int32_t>b[j]
        j += 1
    return s0 + s1 + s2 + s3


def conv1d_ref(const int8_t[:, :] x, const int8_t[:, :, :] w, const int32_t[:] b,
               int stride, int shift, bint relu):
    cdef Py_ssize_t cin = x.shape[0], length = x.shape[1]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    if w.shape[1] != cin or b.shape[0] != cout:
        raise ValueError("conv1d: shape mismatch")
    if length < k or stride < 1:
        raise ValueError("conv1d: input shorter than kernel")
    cdef Py_ssize_t n = (length - k) // stride + 1
    out = np.empty((cout, n), dtype=np.int8)
    cdef int8_t[:, :] o = out
    cdef Py_ssize_t oc, i, c, t
    cdef int32_t acc
    with nogil:
        for oc in range(cout):
            for i in range(n):
                acc = b[oc]
                for c in range(cin):
                    for t in range(k):
                        acc = acc + <int32_t>w[oc, c, t] * <int32_t>x[c, i * stride + t]
                o[oc, i] = _requant(acc, shift, relu)
    return out


def conv1d_fast(const int8_t[:, ::1] x, const int8_t[:, :, ::1] w, const int32_t[::1] b,
                int stride, int shift, bint relu):
    cdef Py_ssize_t cin = x.shape[0], length = x.shape[1]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    if w.shape[1] != cin or b.shape[0] != cout:
        raise ValueError("conv1d: shape mismatch")
    if length < k or stride < 1:
        raise ValueError("conv1d: input shorter than kernel")
    cdef Py_ssize_t n = (length - k) // stride + 1
    out = np.empty((cout, n), dtype=np.int8)
    cdef int8_t[:, ::1] o = out
    # weight-stationary: each group of 4 taps is applied across the whole output row
    cdef int32_t* acc = <int32_t*>malloc(n * sizeof(int32_t))
    if acc == NULL:
        raise MemoryError()
    cdef const int8_t* wp = &w[0, 0, 0]
    cdef const int8_t* xp = &x[0, 0]
    cdef const int8_t* xr
    cdef const int8_t* wr
    cdef int32_t w0, w1, w2, w3
    cdef Py_ssize_t oc, i, c, t, k4 = k - (k % 4)
    with nogil:
        for oc in range(cout):
            for i in range(n):
                acc[i] = b[oc]
            for c in range(cin):
                wr = wp + (oc * cin + c) * k
                t = 0
                while t < k4:
                    w0 = wr[t]
                    w1 = wr[t + 1]
                    w2 = wr[t + 2]
                    w3 = wr[t + 3]
                    xr = xp + c * length + t
                    if stride == 1:
                        for i in range(n):
                            acc[i] += w0 * xr[i] + w1 * xr[i + 1] + w2 * xr[i + 2] + w3 * xr[i + 3]
                    else:
                        for i in range(n):
                            acc[i] += (w0 * xr[i * stride] + w1 * xr[i * stride + 1]
                                       + w2 * xr[i * stride + 2] + w3 * xr[i * stride + 3])
                    t += 4
                while t < k:
                    w0 = wr[t]
                    xr = xp + c * length + t
                    for i in range(n):
                        acc[i] += w0 * xr[i * stride]
                    t += 1
            for i in range(n):
                o[oc, i] = _requant(acc[i], shift, relu)
    free(acc)
    return out


def fc_ref(const int8_t[:] x, const int8_t[:, :] w, const int32_t[:] b, int shift, bint relu):
    """``shift < 0`` returns the raw int32 accumulators (final logits)."""
    cdef Py_ssize_t nin = x.shape[0], nout = w.shape[0]
    if w.shape[1] != nin or b.shape[0] != nout:
        raise ValueError("fc: shape mismatch")
    acc_arr = np.empty(nout, dtype=np.int32)
    cdef int32_t[:] acc = acc_arr
    cdef Py_ssize_t oc, j
    cdef int32_t s
    with nogil:
        for oc in range(nout):
            s = b[oc]
            for j in range(nin):
                s = s + <int32_t>w[oc, j] * <int32_t>x[j]
            acc[oc] = s
    if shift < 0:
        return acc_arr
    return _requant_array(acc_arr, shift, relu)


def fc_fast(const int8_t[::1] x, const int8_t[:, ::1] w, const int32_t[::1] b, int shift, bint relu):
    cdef Py_ssize_t nin = x.shape[0], nout = w.shape[0]
    if w.shape[1] != nin or b.shape[0] != nout:
        raise ValueError("fc: shape mismatch")
    acc_arr = np.empty(nout, dtype=np.int32)
    cdef int32_t[::1] acc = acc_arr
    cdef const int8_t* wp = &w[0, 0] if nout > 0 and nin > 0 else NULL
    cdef int16_t* xw = <int16_t*>malloc((nin + 1) * sizeof(int16_t))
    cdef int16_t* row = <int16_t*>malloc((nin + 1) * sizeof(int16_t))
    if xw == NULL or row == NULL:
        free(xw)
        free(row)
        raise MemoryError()
    cdef Py_ssize_t oc, j
    with nogil:
        for j in range(nin):
            xw[j] = x[j]
        for oc in range(nout):
            for j in range(nin):
                row[j] = wp[oc * nin + j]
            acc[oc] = b[oc] + _dot4(row, xw, nin)
    free(xw)
    free(row)
    if shift < 0:
        return acc_arr
    return _requant_array(acc_arr, shift, relu)


def _requant_array(const int32_t[:] acc, int shift, bint relu):
    cdef Py_ssize_t n = acc.shape[0], i
    out = np.empty(n, dtype=np.int8)
    cdef int8_t[:] o = out
    with nogil:
        for i in range(n):
            o[i] = _requant(acc[i], shift, relu)
    return out


def requantize(acc, int shift, bint relu):
    a = np.ascontiguousarray(acc, dtype=np.int32)
    return _requant_array(a.reshape(-1), shift, relu).reshape(a.shape)


def maxpool1d(const int8_t[:, :] x, int kernel, int stride):
    cdef Py_ssize_t ch = x.shape[0], length = x.shape[1]
    if length < kernel or kernel < 1 or stride < 1:
        raise ValueError("maxpool: input shorter than kernel")
    cdef Py_ssize_t n = (length - kernel) // stride + 1
    out = np.empty((ch, n), dtype=np.int8)
    cdef int8_t[:, :] o = out
    cdef Py_ssize_t c, i, t
    cdef int8_t best
    with nogil:
        for c in range(ch):
            for i in range(n):
                best = x[c, i * stride]
                for t in range(1, kernel):
                    if x[c, i * stride + t] > best:
                        best = x[c, i * stride + t]
                o[c, i] = best
    return out


def dt_predict_u8(const int32_t[::1] feature, const int32_t[::1] threshold,
                  const int32_t[::1] left, const int32_t[::1] right,
                  const int32_t[::1] value, const uint8_t[::1] x):
    """Integer tree walk: go left when ``x[feature] <= threshold``."""
    cdef int32_t node = 0
    cdef int32_t f
    with nogil:
        f = feature[node]
        while f >= 0:
            if <int32_t>x[f] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
            f = feature[node]
    return value[node]


def dt_predict_u8_batch(const int32_t[::1] feature, const int32_t[::1] threshold,
                        const int32_t[::1] left, const int32_t[::1] right,
                        const int32_t[::1] value, const uint8_t[:, ::1] xs):
    cdef Py_ssize_t n = xs.shape[0], r
    out = np.empty(n, dtype=np.int32)
    cdef int32_t[::1] o = out
    cdef int32_t node, f
    with nogil:
        for r in range(n):
            node = 0
            f = feature[node]
            while f >= 0:
                if <int32_t>xs[r, f] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
                f = feature[node]
            o[r] = value[node]
    return out


cdef class TreeWalker:
    """Node arrays bound once, so a single prediction is one short call."""

    cdef int32_t[::1] feature, threshold, left, right, value

    def __init__(self, feature, threshold, left, right, value):
        if len(feature) == 0:
            raise ValueError("empty tree")
        self.feature = np.ascontiguousarray(feature, dtype=np.int32)
        self.threshold = np.ascontiguousarray(threshold, dtype=np.int32)
        self.left = np.ascontiguousarray(left, dtype=np.int32)
        self.right = np.ascontiguousarray(right, dtype=np.int32)
        self.value = np.ascontiguousarray(value, dtype=np.int32)

    def predict(self, cnp.ndarray x):
        # raw data pointer: a memoryview acquisition would cost more than the walk
        if (cnp.PyArray_TYPE(x) != cnp.NPY_UINT8 or not cnp.PyArray_IS_C_CONTIGUOUS(x)
                or cnp.PyArray_NDIM(x) != 1):
            x = np.ascontiguousarray(x, dtype=np.uint8).reshape(-1)
        cdef const uint8_t* px = <const uint8_t*>cnp.PyArray_DATA(x)
        cdef Py_ssize_t n = cnp.PyArray_SIZE(x)
        cdef int32_t node = 0
        cdef int32_t f = self.feature[0]
        while f >= 0:
            if f >= n:
                raise IndexError("feature index beyond the input length")
            if <int32_t>px[f] <= self.threshold[node]:
                node = self.left[node]
            else:
                node = self.right[node]
            f = self.feature[node]
        return self.value[node]

    def predict_batch(self, const uint8_t[:, ::1] xs):
        return dt_predict_u8_batch(self.feature, self.threshold, self.left, self.right, self.value, xs)
