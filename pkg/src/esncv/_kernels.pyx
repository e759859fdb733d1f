# cython: language_level=3
"""Compiled reservoir recurrences.

Both kernels take the recurrent matrix in CSR form (``data``, ``indices``,
``indptr``) and release the GIL for the time loop.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport tanh

cnp.import_array()


def run_reservoir(const double[:, ::1] w_in,
                  const double[::1] w_data,
                  const int[::1] w_indices,
                  const int[::1] w_indptr,
                  double alpha,
                  const double[:, ::1] inputs_t,
                  const double[::1] x0,
                  Py_ssize_t washout):
    """Teacher-forced run over ``inputs_t`` (shape L x n_u).

    Returns ``(x_ext, x_final)`` where ``x_ext`` is Fortran-ordered
    ``(1 + n_u + n_x, L - washout)``.
    """
    cdef Py_ssize_t n_x = w_in.shape[0]
    cdef Py_ssize_t n_u = w_in.shape[1] - 1
    cdef Py_ssize_t L = inputs_t.shape[0]
    cdef Py_ssize_t n_r = 1 + n_u + n_x
    cdef Py_ssize_t t, i, j, p, col
    cdef double pre, leak = 1.0 - alpha

    out = np.empty((n_r, L - washout), dtype=np.float64, order="F")
    cdef double[::1, :] X = out
    scratch_arr = np.empty(2 * n_x, dtype=np.float64)
    cdef double[::1] scratch = scratch_arr
    x_arr = np.array(x0, dtype=np.float64, copy=True)
    cdef double[::1] x0c = x_arr
    # past the washout each state is written straight into its output column
    # and read back from there, which saves a copy per step
    cdef double* prev = &x0c[0] if n_x > 0 else NULL
    cdef double* dest

    with nogil:
        for t in range(L):
            if t >= washout:
                col = t - washout
                X[0, col] = 1.0
                for j in range(n_u):
                    X[1 + j, col] = inputs_t[t, j]
                dest = &X[1 + n_u, col]
            elif prev == &scratch[0]:
                dest = &scratch[n_x]
            else:
                dest = &scratch[0]
            for i in range(n_x):
                pre = w_in[i, 0]
                for j in range(n_u):
                    pre = pre + w_in[i, 1 + j] * inputs_t[t, j]
                for p in range(w_indptr[i], w_indptr[i + 1]):
                    pre = pre + w_data[p] * prev[w_indices[p]]
                dest[i] = leak * prev[i] + alpha * tanh(pre)
            prev = dest
        for i in range(n_x):
            x0c[i] = prev[i]
    return out, x_arr


def run_closed_loop(const double[:, ::1] w_in,
                    const double[::1] w_data,
                    const int[::1] w_indices,
                    const int[::1] w_indptr,
                    double alpha,
                    const double[:, ::1] w_out,
                    const double[::1] x0,
                    const double[::1] u0,
                    Py_ssize_t horizon):
    """Generative run: each output becomes the next input.

    Returns ``(y, x_final)`` with ``y`` of shape ``(n_y, horizon)``.
    """
    cdef Py_ssize_t n_x = w_in.shape[0]
    cdef Py_ssize_t n_u = w_in.shape[1] - 1
    cdef Py_ssize_t n_y = w_out.shape[0]
    cdef Py_ssize_t t, i, j, p
    cdef double pre, acc, leak = 1.0 - alpha

    if n_y != n_u:
        raise ValueError(f"closed loop needs n_y == n_u, got {n_y} and {n_u}")
    if w_out.shape[1] != 1 + n_u + n_x:
        raise ValueError("w_out has the wrong number of columns")

    out = np.empty((n_y, horizon), dtype=np.float64, order="F")
    cdef double[::1, :] Y = out
    x_arr = np.array(x0, dtype=np.float64, copy=True)
    cdef double[::1] x = x_arr
    cdef double[::1] x_new = np.empty(n_x, dtype=np.float64)
    cdef double[::1] u = np.array(u0, dtype=np.float64, copy=True)

    with nogil:
        for t in range(horizon):
            for i in range(n_x):
                pre = w_in[i, 0]
                for j in range(n_u):
                    pre = pre + w_in[i, 1 + j] * u[j]
                for p in range(w_indptr[i], w_indptr[i + 1]):
                    pre = pre + w_data[p] * x[w_indices[p]]
                x_new[i] = leak * x[i] + alpha * tanh(pre)
            for i in range(n_x):
                x[i] = x_new[i]
            for j in range(n_y):
                acc = w_out[j, 0]
                for i in range(n_u):
                    acc = acc + w_out[j, 1 + i] * u[i]
                for i in range(n_x):
                    acc = acc + w_out[j, 1 + n_u + i] * x[i]
                Y[j, t] = acc
            for j in range(n_u):
                u[j] = Y[j, t]
    return out, x_arr
