"""Shared builders for the model-level tests."""

import numpy as np

from soli import losses
from soli.nncore import autograd as ag
from soli.nncore import DecoderSpec, EncoderSpec, decode_teacher_forced, encode, init_params

# criterion number -> one-line verdict, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}

TINY_ENC = EncoderSpec(side=8, channels=(4, 6, 8), embedding_dim=8)
TINY_DEC = DecoderSpec(vocab_size=11, token_dim=6, hidden_dim=8)


def tiny_model(seed=1, dtype=np.float64):
    return init_params(TINY_ENC, TINY_DEC, seed).astype(dtype)


def tiny_batch(seed=5, n=3, t=4, dtype=np.float64):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (n, 3, 8, 8)).astype(dtype)
    ids = rng.integers(4, 11, (n, t))
    ids[:, 0] = 1
    targets = np.concatenate([ids[:, 1:], np.full((n, 1), 2)], axis=1)
    targets[0, -1] = 0  # one padded position
    return x, ids, targets


def soli_objective(ps, xa, xb, ids, targets, labels, gamma=0.7, lam=1.3, margin=1.0):
    ea, eb = encode(ps, xa), encode(ps, xb)
    ce_a = losses.cross_entropy(decode_teacher_forced(ps, ea, ids), targets)
    ce_b = losses.cross_entropy(decode_teacher_forced(ps, eb, ids), targets)
    c = losses.contrastive(losses.ContrastiveBatch(ea, eb, labels, margin))
    return losses.soli_loss(c, losses.mean_of([ce_a, ce_b], "cross_entropy"), gamma, lam)


def relu_clearance(ps, *inputs):
    """Smallest |pre-activation| of any encoder ReLU; finite differences need it > 2h."""
    m = np.inf
    for x in inputs:
        t, i = ag.Tensor(x), 0
        while f"enc.conv{i}.w" in ps:
            z = ag.conv2d(t, ps[f"enc.conv{i}.w"], ps[f"enc.conv{i}.b"])
            m = min(m, float(np.abs(z.data).min()))
            t, i = ag.relu(z), i + 1
    return m


def clock_model(enc, vocab, words, big=12.0):
    """Decoder hand-wired to emit ``words`` then eos for any image.

    The hidden state is a one-hot clock: h0 lights unit 0, each step shifts the
    lit unit by one, and the output row of unit k points at word k.
    """
    seq = [vocab.id(w) for w in words] + [2]
    H = len(seq) + 1
    ps = init_params(enc, DecoderSpec(vocab.size, 4, H), seed=0)
    for name in ps.names("dec."):
        ps[name].data[...] = 0
    ps["dec.init.b"].data[0] = big
    for k in range(H - 1):
        ps["dec.wh"].data[k, k + 1] = big
    for k, tok in enumerate(seq):
        ps["dec.out.w"].data[k + 1, tok] = big
    return ps


def verdict(n, ok, detail):
    """Record and print one acceptance line, then fail the test if it did not pass."""
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line
