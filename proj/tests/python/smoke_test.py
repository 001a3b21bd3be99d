"""Python binding smoke tests (run with PYTHONPATH pointing at the build tree)."""

import math

import odeid


def test_expressions():
    assert odeid.parse_expr("x + x") == "2*x"
    d = odeid.differentiate_expr("sin(a)/b", "b")
    v = odeid.evaluate_expr(d, {"a": 0.7, "b": 2.0})
    assert abs(v - (-math.sin(0.7) / 4.0)) < 1e-12
    assert odeid.is_zero_expr("sin(z)^2 + cos(z)^2 - 1")
    assert not odeid.is_zero_expr("x*y - x")


def test_builtins_listed():
    names = odeid.builtin_models()
    assert set(names) == {"unicycle_s1", "unicycle_s2", "hiv", "seiar", "toggle"}


def test_analyze_unicycle():
    rep = odeid.analyze("unicycle_s1")
    assert rep["observability"]["dim"] == 2
    assert rep["identifiability"]["tv_params"]["omega"]["identifiable"] is True
    rep2 = odeid.analyze("unicycle_s2")
    assert rep2["observability"]["dim"] == 1
    assert rep2["identifiability"]["tv_params"]["v"]["identifiable"] is False


def test_analyze_hiv():
    rep = odeid.analyze("hiv")
    assert rep["observability"]["dim"] == 7
    consts = rep["identifiability"]["constants"]
    assert consts["lambda"] and consts["rho"] and consts["c"]
    assert not consts["delta"] and not consts["N"]
    assert rep["identifiability"]["tv_params"]["eta"]["identifiable"] is False


def test_analyze_user_model():
    model = """{
      "name": "decay",
      "states": ["x"],
      "unknown_inputs": ["w"],
      "dynamics": {"x": "-x + w"},
      "outputs": ["x"]
    }"""
    rep = odeid.analyze(model)
    assert rep["observability"]["dim"] == 1
    assert rep["identifiability"]["tv_params"]["w"]["identifiable"] is True


def test_bad_model_raises():
    try:
        odeid.analyze('{"name": "m", "bogus": 1}')
    except odeid.ModelValidationError:
        pass
    else:
        raise AssertionError("expected ModelValidationError")


def test_indistinguishable_unicycle():
    rep = odeid.indistinguishable("unicycle_s2", sym_index=1, taus=(0.0, 0.25))
    assert rep["pass"] is True
    assert rep["worst_relative_deviation"] <= 1e-5


def main():
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for t in tests:
        t()
        print(f"ok  {t.__name__}")
    print(f"{len(tests)} python smoke tests passed")


if __name__ == "__main__":
    main()
