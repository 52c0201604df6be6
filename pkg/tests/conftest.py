import math

import numpy as np
import pytest

from skipfuse import tensor as T


def loop_matmul(a, b):
    """Triple-loop reference product."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def brute_attention(query_src, kv_src, params, mask=None):
    """Attention with explicit per-head, per-query loops and no batching."""
    q_src = np.asarray(query_src, dtype=np.float64)
    kv = np.asarray(kv_src, dtype=np.float64)
    d = q_src.shape[1]
    h = params.n_heads
    dh = d // h
    wq, wk, wv, wo = (np.asarray(getattr(params, n).data, dtype=np.float64) for n in ("wq", "wk", "wv", "wo"))
    bq, bk, bv, bo = (np.asarray(getattr(params, n).data, dtype=np.float64) for n in ("bq", "bk", "bv", "bo"))
    q = loop_matmul(q_src, wq) + bq
    k = loop_matmul(kv, wk) + bk
    v = loop_matmul(kv, wv) + bv
    ctx = np.zeros((q_src.shape[0], d))
    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        for i in range(q_src.shape[0]):
            scores = []
            for j in range(kv.shape[0]):
                if mask is not None and not mask[i][j]:
                    scores.append(None)
                    continue
                scores.append(sum(q[i, sl] * k[j, sl]) / math.sqrt(dh))
            live = [s for s in scores if s is not None]
            top = max(live)
            weights = [0.0 if s is None else math.exp(s - top) for s in scores]
            total = sum(weights)
            for j, w in enumerate(weights):
                ctx[i, sl] += (w / total) * v[j, sl]
    return loop_matmul(ctx, wo) + bo


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


def ln_ref(x, ln):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + ln.eps) * ln.gain.data + ln.bias.data


def gelu_ref(x):
    return np.vectorize(lambda z: 0.5 * z * (1 + math.erf(z / math.sqrt(2))))(x)


def ffn_ref(x, f):
    hidden = gelu_ref(x @ f.fc1.weight.data + f.fc1.bias.data)
    return hidden @ f.fc2.weight.data + f.fc2.bias.data


def key_mask_ref(n_q, valid):
    return None if valid is None else np.broadcast_to(np.asarray(valid), (n_q, len(valid)))


def block_ref(x, block, valid=None):
    """Pre-LN encoder block from numpy pieces."""
    h = ln_ref(x, block.ln1)
    x = x + brute_attention(h, h, block.attn, key_mask_ref(len(x), valid))
    return x + ffn_ref(ln_ref(x, block.ln2), block.ffn)


# -- acceptance reporting ---------------------------------------------------------

_ACCEPTANCE_LINES: list[str] = []


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title = number, title
        self.failures: list[str] = []
        self.notes: list[str] = []

    def check(self, ok, message):
        if not ok:
            self.failures.append(message)
        return ok

    def note(self, message):
        self.notes.append(message)


@pytest.fixture
def criterion():
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    import contextlib
    import time

    @contextlib.contextmanager
    def run(number, title, budget_seconds=None):
        rec = _Criterion(number, title)
        start = time.perf_counter()
        try:
            yield rec
        except Exception as exc:  # report, then re-raise for pytest
            rec.failures.append(f"{type(exc).__name__}: {exc}")
            raise
        finally:
            elapsed = time.perf_counter() - start
            if budget_seconds is not None:
                rec.check(elapsed < budget_seconds, f"took {elapsed:.1f}s, budget {budget_seconds}s")
            status = "FAIL" if rec.failures else "PASS"
            detail = "; ".join(rec.failures + rec.notes + [f"{elapsed:.1f}s"])
            line = f"criterion {number} {status}: {title} ({detail})"
            _ACCEPTANCE_LINES.append(line)
            print(line)
        assert not rec.failures, "; ".join(rec.failures)

    return run


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
