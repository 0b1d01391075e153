"""Smoke test for the provider_dp extension module."""

import json
import math
import pathlib
import tempfile

import provider_dp as pdp


def main():
    assert pdp.levenshtein("kitten", "sitting") == 3
    assert pdp.nls("abc", "abc") == 1.0
    assert pdp.nls("", "") == 1.0

    clipped = pdp.clip_update([3.0, 4.0], 1.0)
    assert math.hypot(*clipped) <= 1.0 + 1e-12

    eps, order = pdp.epsilon_for(1.2524, 0.241, 10)
    assert 0 < eps < 10, eps
    sigma = pdp.calibrate_sigma(eps, 0.241, 10)
    assert abs(sigma - 1.2524) < 1e-2, sigma

    total = pdp.secure_sum([[0.5, -0.25], [0.25, 0.125]], 1.0, seed=7)
    assert all(abs(a - b) < 1e-5 for a, b in zip(total, [0.75, -0.125])), total
    assert 2 <= pdp.choose_modulus_bits(1.0, 10) <= 64

    assert abs(pdp.communication_cost([2, 2], 1000, 4) - 32000 / 1e9) < 1e-15

    config = """
schema_version = 1
seed = 3
modes = ["fedavg"]

[corpus]
n_providers = 8
n_clients = 2

[model]
embed_dim = 8
hidden_dim = 16

[training]
rounds = 1
client_sampling = { kind = "all" }

[training.hyper]
local_steps = { steps = 2 }
"""
    h1 = pdp.config_hash(config)
    assert len(h1) == 64
    try:
        pdp.config_hash(config + "bogus = 1\n")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    with tempfile.TemporaryDirectory() as d:
        manifest = pdp.run_experiment(config, d)
        assert manifest["failed_stage"] is None, manifest
        for a in manifest["artifacts"]:
            assert (pathlib.Path(d) / a).exists(), a
        print(json.dumps({"artifacts": len(manifest["artifacts"]), "epsilon": eps}))
    print("smoke test passed")


if __name__ == "__main__":
    main()
