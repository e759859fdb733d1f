"""Pure-numpy versions of the compiled recurrences in ``_kernels.pyx``.

Signatures match the compiled module so ``esncv.kernels`` can swap them.
"""
import numpy as np
import scipy.sparse as sp

# below this reservoir size a dense matvec beats scipy's sparse overhead
_DENSE_LIMIT = 300


def _recurrent_operator(w_data, w_indices, w_indptr, n_x):
    w = sp.csr_matrix((w_data, w_indices, w_indptr), shape=(n_x, n_x))
    if n_x <= _DENSE_LIMIT:
        return w.toarray()
    return w


def run_reservoir(w_in, w_data, w_indices, w_indptr, alpha, inputs_t, x0, washout):
    n_x = w_in.shape[0]
    n_u = w_in.shape[1] - 1
    L = inputs_t.shape[0]
    w = _recurrent_operator(w_data, w_indices, w_indptr, n_x)
    drive = w_in[:, :1] + w_in[:, 1:] @ inputs_t.T
    out = np.empty((1 + n_u + n_x, L - washout), order="F")
    out[0] = 1.0
    out[1:1 + n_u] = inputs_t[washout:].T
    x = np.array(x0, dtype=np.float64, copy=True)
    leak = 1.0 - alpha
    for t in range(L):
        x = leak * x + alpha * np.tanh(drive[:, t] + w @ x)
        if t >= washout:
            out[1 + n_u:, t - washout] = x
    return out, x


def run_closed_loop(w_in, w_data, w_indices, w_indptr, alpha, w_out, x0, u0, horizon):
    n_x = w_in.shape[0]
    n_u = w_in.shape[1] - 1
    n_y = w_out.shape[0]
    if n_y != n_u:
        raise ValueError(f"closed loop needs n_y == n_u, got {n_y} and {n_u}")
    if w_out.shape[1] != 1 + n_u + n_x:
        raise ValueError("w_out has the wrong number of columns")
    w = _recurrent_operator(w_data, w_indices, w_indptr, n_x)
    bias_in, w_u = w_in[:, 0], w_in[:, 1:]
    bias_out, w_out_u, w_out_x = w_out[:, 0], w_out[:, 1:1 + n_u], w_out[:, 1 + n_u:]
    out = np.empty((n_y, horizon), order="F")
    x = np.array(x0, dtype=np.float64, copy=True)
    u = np.array(u0, dtype=np.float64, copy=True)
    leak = 1.0 - alpha
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(horizon):
            x = leak * x + alpha * np.tanh(bias_in + w_u @ u + w @ x)
            u = bias_out + w_out_u @ u + w_out_x @ x
            out[:, t] = u
    return out, x
