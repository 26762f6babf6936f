"""Central finite-difference gradient checking in float64."""

import numpy as np

from consistmmt import tensor as T


def numeric_grad(f, arrays, h=1e-3):
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f(*arrays)
            a[i] = old - h
            fm = f(*arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps gradients that are zero up to rounding from turning
    into relative noise; above it the comparison is fully relative.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = np.asarray(a, np.float64), np.asarray(n, np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def scaled_error(analytic, numeric):
    """``max |a - n|`` relative to the largest reference magnitude."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    return float(np.abs(a - n).max() / max(np.abs(n).max(), 1e-12))


def check(build, arrays, h=1e-3):
    """``build(*tensors) -> scalar Tensor``; returns the max relative error."""
    with T.default_dtype(np.float64):
        ts = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
        T.backward(build(*ts))
        analytic = [t.grad for t in ts]

        def f(*arrs):
            with T.no_grad():
                return build(*[T.Tensor(a) for a in arrs]).item()

        numeric = numeric_grad(f, [a.copy() for a in arrays], h)
    return max_rel_error(analytic, numeric)


class KinkRecorder:
    """Records relu/abs sign patterns and OT assignments seen during a forward pass.

    Two evaluations with equal records lie on the same smooth piece of the
    loss, so a central difference between them is a valid reference.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        from consistmmt import losses

        self._saved = (T.relu, T.absolute, losses.relaxed_assignment)
        relu, absolute, assign = self._saved

        def rec_relu(x):
            self.records.append(x.data > 0)
            return relu(x)

        def rec_abs(x):
            self.records.append(x.data > 0)
            return absolute(x)

        def rec_assign(src, tgt):
            idx = assign(src, tgt)
            self.records.append(idx)
            return idx

        T.relu, T.absolute, losses.relaxed_assignment = rec_relu, rec_abs, rec_assign
        return self

    def __exit__(self, *exc):
        from consistmmt import losses

        T.relu, T.absolute, losses.relaxed_assignment = self._saved

    def take(self):
        out, self.records = self.records, []
        return out


def same_piece(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def model_loss_error(seed, n_coords=40, h=1e-3, kl=0.5, ot=0.1):
    """Scaled max error of d(total loss)/d(params) on a tiny model.

    Analytic gradients come from the float32 forward/backward; the reference
    is a float64 central difference. Coordinates whose +-h perturbation
    crosses a relu/abs kink or flips an OT assignment are redrawn.
    """
    from consistmmt.data import collate
    from consistmmt.losses import LossWeights, compute_losses
    from consistmmt.model import ModelConfig, MultimodalTransformer
    from consistmmt.toy import make_toy

    rng = np.random.default_rng(seed)
    toy = make_toy(3, seed=seed, d_feat=6, min_len=2, max_len=4, n_words=5, syn_noise=0.5)
    cfg = ModelConfig(vocab_size=len(toy.vocab), layers=1, d_model=8, ffn_dim=12, heads=2, dropout=0.0, d_feat=6)
    batch = collate(toy.examples, [0, 1, 2], toy.syn, toy.aut)
    weights = LossWeights(kl=kl, ot=ot)
    init = MultimodalTransformer(cfg, rng=np.random.default_rng(seed + 1000))
    arrays = {k: p.data.astype(np.float32) for k, p in init.params.items()}

    model32 = MultimodalTransformer(cfg)
    model32.load_arrays(arrays)
    total, _ = compute_losses(model32, batch, weights, 0.1)
    T.backward(total)
    grads = {k: p.grad.astype(np.float64) for k, p in model32.params.items()}

    with T.default_dtype(np.float64):
        model = MultimodalTransformer(cfg)
        model.load_arrays({k: v.astype(np.float64) for k, v in arrays.items()})
        b64 = collate(toy.examples, [0, 1, 2], toy.syn, toy.aut)
        b64.syn = b64.syn.astype(np.float64)
        b64.aut = b64.aut.astype(np.float64)

        def loss():
            with T.no_grad():
                return compute_losses(model, b64, weights, 0.1)[0].item()

        names = sorted(grads)
        analytic, numeric = [], []
        with KinkRecorder() as rec:
            loss()
            base = rec.take()
            attempts = 0
            while len(analytic) < n_coords:
                attempts += 1
                if attempts > 50 * n_coords:
                    raise RuntimeError("could not find smooth coordinates")
                k = names[rng.integers(len(names))]
                idx = tuple(int(rng.integers(s)) for s in grads[k].shape)
                arr = model.params[k].data
                old = arr[idx]
                arr[idx] = old + h
                fp = loss()
                up = rec.take()
                arr[idx] = old - h
                fm = loss()
                down = rec.take()
                arr[idx] = old
                if not (same_piece(base, up) and same_piece(base, down)):
                    continue
                analytic.append(grads[k][idx])
                numeric.append((fp - fm) / (2 * h))
    return scaled_error(analytic, numeric)
