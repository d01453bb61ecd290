"""Quick check of the Python bindings. Build first with
`pip install --no-build-isolation ./crates/python` (needs maturin)."""

import numpy as np

import glocal


def main():
    g = glocal.Graph.community(n_communities=3, community_size=4, seed=1)
    adj = g.adjacency()
    assert adj.shape == (12, 12)
    assert np.allclose(adj, adj.T)

    proc = glocal.Process(g, "gpvar-l", seed=0)
    x = proc.simulate(500, burn_in=20, seed=2)
    assert x.shape == (500, 12) and np.isfinite(x).all()
    history = x[-proc.required_history:]
    assert proc.predict_next(history).shape == (12,)

    exp = glocal.Experiment.preset("gpvar-l:tts_iso_emb")
    exp.update("""
[graph]
n_communities = 3
community_size = 4

[process]
steps = 1500
burn_in = 20

[train]
batch_size = 16
max_epochs = 2
batches_per_epoch = 5
patience = 2
""")
    exp.seed = 3
    run = exp.train()
    report = run.report()
    assert report["n_nodes"] == 12
    assert np.isfinite(run.test_mae)
    assert run.embeddings().shape == (12, 8)
    assert "tts_iso_emb" in glocal.presets()
    print(f"ok: test MAE {run.test_mae:.4f} (oracle {run.optimal_test_mae:.4f}), "
          f"{run.param_count} parameters, optimal MAE at sigma 0.4 = {glocal.optimal_mae(0.4):.4f}")

    try:
        glocal.Experiment.preset("nope")
    except glocal.GlocalError as e:
        print("ok: bad preset rejected:", str(e).splitlines()[0])
    else:
        raise AssertionError("unknown preset accepted")


if __name__ == "__main__":
    main()
