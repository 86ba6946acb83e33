"""Smoke test for the cgdro_py extension module.

Build the module first, for example with
    cargo build --release -p cgdro-py --features extension-module
and put the resulting shared library on PYTHONPATH as cgdro_py.so.
"""

import json
import math

import cgdro_py as cg


def main() -> None:
    sources, target = cg.simulate("S1", n=300, n_target=1000, seed=5, d=4)
    assert len(sources) == 2 and len(target) == 1000
    assert all(s.n_classes == 2 for s in sources)

    cfg = cg.ProblemConfig(seed=5, M=60)
    fit = cg.fit(sources, target, cfg)
    assert fit.converged
    assert abs(sum(fit.gamma) - 1.0) < 1e-9
    assert len(fit.theta) == 4 and all(math.isfinite(t) for t in fit.theta)
    doc = json.loads(fit.to_json())
    assert doc["theta"] == fit.theta and "moments" in doc

    gdro = cg.fit(sources, target, cfg, method="gdro")
    erm = cg.fit(sources, target, method="erm")
    assert len(gdro.theta) == len(erm.theta) == 4

    res = cg.infer(sources, target, 0, cfg)
    lo = min(iv[0] for iv in res.ci)
    hi = max(iv[1] for iv in res.ci)
    assert lo <= res.theta[0] <= hi
    assert res.filtered_m > 0 and res.width > 0
    assert res.reject_zero == (not res.covers(0.0))

    try:
        cg.ProblemConfig(alpha=0.7)
    except ValueError:
        pass
    else:
        raise AssertionError("invalid alpha accepted")

    print("theta:", [round(t, 4) for t in fit.theta])
    print("gamma:", [round(g, 4) for g in fit.gamma])
    print("CI for theta[0]:", res.ci)
    print("smoke test passed")


if __name__ == "__main__":
    main()
