"""Independent scalar/matrix reference recurrences.

Deliberately written without the package's tensor machinery: plain numpy
arithmetic, one time step at a time, straight from the update equations.
A convolutional cell evaluated at 1x1 spatial extent with 1 channel must
reproduce these exactly (the zero padding kills every kernel tap except
the center, so the cell degenerates to a scalar recurrence whose weight
is the kernel's center element).
"""

import numpy as np


def _sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def scalar_gru_sequence(xs, w, h0=0.0):
    """GRU recurrence; ``w`` keys: zh, zx, bz, rh, rx, br, hh, hx, bh.

    ``xs`` is [T] or [T, batch]; returns the hidden state after each step.
    """
    h = h0
    out = []
    for x in xs:
        z = _sig(w["zh"] * h + w["zx"] * x + w["bz"])
        r = _sig(w["rh"] * h + w["rx"] * x + w["br"])
        hb = np.tanh(w["hh"] * (r * h) + w["hx"] * x + w["bh"])
        h = z * h + (1.0 - z) * hb
        out.append(h)
    return np.asarray(out)


def scalar_lstm_sequence(xs, w, h0=0.0, c0=0.0):
    """Peephole-free LSTM; ``w`` keys: {i,f,g,o} x {h,x} plus b{i,f,g,o}."""
    h, c = h0, c0
    hs, cs = [], []
    for x in xs:
        i = _sig(w["ih"] * h + w["ix"] * x + w["bi"])
        f = _sig(w["fh"] * h + w["fx"] * x + w["bf"])
        g = np.tanh(w["gh"] * h + w["gx"] * x + w["bg"])
        o = _sig(w["oh"] * h + w["ox"] * x + w["bo"])
        c = f * c + i * g
        h = o * np.tanh(c)
        hs.append(h)
        cs.append(c)
    return np.asarray(hs), np.asarray(cs)


def scalar_elman_sequence(xs, w, h0=0.0):
    """h_t = sigmoid(wh*h + bh) + wx*x; the sum is not squashed."""
    h = h0
    out = []
    for x in xs:
        h = _sig(w["wh"] * h + w["bh"]) + w["wx"] * x
        out.append(h)
    return np.asarray(out)


def scalar_rg_sequence(xs, w, h0=0.0, c0=0.0):
    """Recurrent-gated pair of states driven by complementary gates.

    ``w`` keys: ch, bch, hh, bhh, hc, bhc, cc, bcc (gates) and xh, xc,
    wh, wc (drives).
    """
    h, c = h0, c0
    hs, cs = [], []
    for x in xs:
        h_new = (1.0 - _sig(w["ch"] * c + w["bch"])) * (w["xh"] * x) \
            + (1.0 - _sig(w["hh"] * h + w["bhh"])) * (w["wh"] * h)
        c_new = (1.0 - _sig(w["hc"] * h + w["bhc"])) * (w["xc"] * x) \
            + (1.0 - _sig(w["cc"] * c + w["bcc"])) * (w["wc"] * c)
        h, c = h_new, c_new
        hs.append(h)
        cs.append(c)
    return np.asarray(hs), np.asarray(cs)


def dense_gru_sequence(xs, w, h0):
    """Matrix GRU over flat vectors; ``w`` keys as scalar_gru_sequence.

    ``xs`` is [T, batch, n]; weights [m, m] (recurrent) / [m, n] (input);
    biases [m]; ``h0`` is [batch, m].
    """
    h = h0
    out = []
    for x in xs:
        z = _sig(h @ w["zh"].T + x @ w["zx"].T + w["bz"])
        r = _sig(h @ w["rh"].T + x @ w["rx"].T + w["br"])
        hb = np.tanh((r * h) @ w["hh"].T + x @ w["hx"].T + w["bh"])
        h = z * h + (1.0 - z) * hb
        out.append(h)
    return np.asarray(out)
