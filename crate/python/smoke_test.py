"""Quick check of the compiled extension: python python/smoke_test.py"""
import math
import os
import tempfile

import numpy as np

import mcse


def main():
    rng = np.random.default_rng(0)

    x = rng.standard_normal(4000).tolist()
    re, im = mcse.stft(x)
    y = mcse.istft(re, im, len(x))
    err = np.max(np.abs(np.asarray(y) - np.asarray(x)))
    assert err < 1e-9, err

    ref = rng.standard_normal(8000)
    noisy = ref + 0.1 * rng.standard_normal(8000)
    s = mcse.si_sdr(ref.tolist(), noisy.tolist())
    assert math.isclose(mcse.si_sdr(ref.tolist(), (3.0 * noisy).tolist()), s, abs_tol=1e-6)
    assert 15.0 < s < 25.0, s

    counts = {m: mcse.param_count(m, "paper")["total"] for m in (1, 2)}
    assert counts[2] - counts[1] == 128, counts

    item = mcse.simulate_item(0, duration=0.5, seed=3)
    assert len(item["noisy"]) == 6 and len(item["clean"]) == 8000

    model = mcse.Model(6, "desk", seed=1)
    out = model.enhance(item["noisy"])
    assert len(out) == len(item["clean"]) and np.all(np.isfinite(out))

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path)
        again = mcse.Model.load(path)
        assert again.param_count() == model.param_count()
        assert again.enhance(item["noisy"]) == out
        try:
            again.enhance(item["noisy"][:4])
        except ValueError:
            pass
        else:
            raise AssertionError("channel mismatch accepted")

    L, D, N = 50, 2, 3
    ab = rng.uniform(0.5, 0.99, (L, D, N))
    bb = rng.uniform(-0.5, 0.5, (L, D, N))
    c = rng.uniform(-1, 1, (L, N))
    u = rng.uniform(-1, 1, (L, D))
    seq = np.asarray(mcse.scan(ab.tolist(), bb.tolist(), c.tolist(), u.tolist()))
    chk = np.asarray(mcse.scan(ab.tolist(), bb.tolist(), c.tolist(), u.tolist(), chunk=7))
    assert np.max(np.abs(seq - chk)) < 1e-10

    print(model)
    print("smoke test ok")


if __name__ == "__main__":
    main()
