"""Smoke test for the maxhom_py extension module.

Build and install first, e.g.

    pip install --no-build-isolation ./crates/py
"""

import math
import os
import tempfile

import maxhom_py as mh

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def preset(name):
    with open(os.path.join(ROOT, "presets", name)) as f:
        return f.read()


def main():
    print("maxhom_py", mh.__version__)

    r = mh.verify_conductivity(2.0, 0.5, samples=2000, seed=1)
    assert r["pass"] and r["violations"] == [], r
    bad = mh.verify_conductivity(0.5)
    assert not bad["pass"] and bad["violations"], bad

    w = mh.tau_apply([0.25, 0.5, 0.0], [0.9, 0.1, 0.3], invariant_mask=[False, False, True])
    assert abs(w[0] - 0.15) < 1e-12 and abs(w[1] - 0.6) < 1e-12 and w[2] == 0.3, w
    pts = mh.sample_omega(1000, seed=7)
    assert len(pts) == 1000 and all(0.0 <= c < 1.0 for p in pts for c in p)
    assert pts == mh.sample_omega(1000, seed=7)

    # harmonic mean across the layers, arithmetic mean along them
    t = mh.laminate_tensor([1.0, 1.0, 1.0], [3.0, 3.0, 3.0], theta=0.5, axis=0, resolution=32)
    assert abs(t[0][0] - 1.5) < 1e-10 and abs(t[1][1] - 2.0) < 1e-10, t

    # first mode with eta = mu = kappa = 1: damped oscillation
    modes = mh.galerkin_propagate(1.0, 1.0, 1.0, [1.0], t=0.7, modes=4)
    nu = math.sqrt(math.pi ** 2 - 0.25)
    exact = math.exp(-0.35) * (math.cos(nu * 0.7) - math.sin(nu * 0.7) / (2 * nu))
    assert len(modes) == 8
    assert abs(math.sqrt(2.0) * modes[0] - exact) < 1e-8, (modes[0], exact)

    cfg = mh.parse_config(preset("micro-constant.toml"))
    assert cfg["seed"] is not None

    with tempfile.TemporaryDirectory() as out:
        res = mh.run_scenario("validate", preset("micro-constant.toml"), out, seed=3)
        assert res["pass"] and res["exit_code"] == 0, res
        assert "validate.json" in res["outputs"]
        try:
            mh.run_scenario("validate", "seed = ", out)
        except ValueError:
            pass
        else:
            raise AssertionError("malformed config accepted")

        res = mh.run_scenario("eps_run", preset("micro-constant.toml"), out)
        assert res["pass"], res
        e_file = next(f for f in res["outputs"] if f.endswith("_E.bin"))
        header, records = mh.read_field_record(os.path.join(out, e_file))
        assert header["location"] == "edge" and header["records"] == len(records)
        step, t0, comps = records[0]
        assert step == 0 and t0 == 0.0 and len(comps) == 3

    print("smoke test passed")


if __name__ == "__main__":
    main()
