"""Smoke test for the madrom_py extension.

Build first:  pip install --no-build-isolation -e crates/python
(or: maturin develop -m crates/python/Cargo.toml)
"""
import math
import os
import sys
import tempfile

import madrom_py as m

TINY = """
family = "ode"
[tasks]
pretrain = 4
finetune = 2
[network]
width = 8
depth = 3
[train]
interior_samples = 16
pretrain_iters = 20
finetune_iters = 20
eval_every = 5
strict = true
threads = 1
[eval]
ode_points = 64
"""


def main():
    exp = m.Experiment(TINY)
    assert exp.family == "ode"
    model, losses = exp.pretrain()
    assert len(losses) == 21 and losses[-1] < losses[0], losses
    assert len(model.latents) == 4

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        back = m.Model.load(path)
        assert back.weights_digest() == model.weights_digest()

    # latent-only fine-tuning must not touch the weights
    before = model.weights_digest()
    res = exp.finetune(model, "mad-l")
    assert model.weights_digest() == before
    assert len(res) == 2 and all(math.isfinite(e) for e, _ in res)

    u = model.evaluate([[0.0], [1.0]], model.latents[0])
    assert len(u) == 2

    assert m.relative_l2([1.0, 2.0], [1.0, 2.0]) == 0.0
    try:
        m.Experiment('family = "ode"\n[train]\nbogus = 1\n')
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")
    print("python smoke ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
