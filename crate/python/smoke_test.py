"""Smoke test for the pynae extension.

Build and install first:
    pip install --no-build-isolation -e crates/python
then run:
    python python/smoke_test.py
"""

import math
import tempfile

import pynae

TINY = """
[data]
n_train = 256
n_heldout = 100

[model]
architecture = { preset = "mlp", hidden = [16], activation = "leaky_relu" }

[train]
batch_size = 64
nae_epochs = 2
learning_rate = 1e-3

[output]
checkpoint_every = 0
"""


def main():
    assert pynae.auc([0.1, 0.3], [0.2, 0.4]) == 0.75

    ident = pynae.Model.identity(2)
    assert ident.energy([[0.5, -1.0], [2.0, 3.0]]) == [0.0, 0.0]
    assert abs(ident.log_omega(resolution=16) - math.log(64.0)) < 1e-12

    model = pynae.Model(2, seed=1)
    energies, grads = model.energy_and_grad([[0.1, 0.2]])
    assert len(energies) == 1 and len(grads[0]) == 2

    with tempfile.TemporaryDirectory() as out:
        ckpt = pynae.train(out, TINY, seed=3)
        trained = pynae.Model.load(ckpt)
        print(trained)
        metrics = pynae.density(ckpt, resolution=32)
        assert set(metrics) == {"heldout_avg_loglik", "grid_kl", "spurious_mass"}
        xs = pynae.sample(ckpt, n=8, mode="full", seed=0)
        assert len(xs) == 8 and all(len(r) == 2 for r in xs)
        (name, auc), = pynae.eval_ood(ckpt, n=200)
        assert name == "uniform_box" and 0.0 <= auc <= 1.0
        print("density", metrics, "auc", auc)

    failed = [name for name, ok, _ in pynae.check() if not ok]
    assert not failed, failed
    print("smoke test passed")


if __name__ == "__main__":
    main()
