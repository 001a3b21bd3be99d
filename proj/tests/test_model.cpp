#include <doctest.h>

#include "odeid/model.hpp"

using namespace odeid;

TEST_CASE("toggle switch conversion introduces derivative inputs") {
    OdeModel m = builtin("toggle");
    CHECK(m.state == std::vector<std::string>{"x1", "x2", "W1", "W2", "k01", "k1", "n1", "k02",
                                              "k2", "n2"});
    CHECK(m.n() == 10);
    CHECK(m.mu() == 0);
    CHECK(m.mw() == 2);
    CHECK(m.unknown_inputs == std::vector<std::string>{"W1'", "W2'"});
    CHECK(m.ui_origin.at("W1'").base_name == "W1");
    CHECK(m.ui_origin.at("W1'").derivative_order == 1);
    // g^1 = e_3, g^2 = e_4 (unit fields on the promoted parameters)
    for (int i = 0; i < 10; ++i) {
        CHECK(m.g[0][i].is_zero() == (i != 2));
        CHECK(m.g[1][i].is_zero() == (i != 3));
    }
    // drift rows beyond the two original states vanish
    for (int i = 2; i < 10; ++i) CHECK(m.g0[i].is_zero());
    CHECK_FALSE(m.time_varying);
}

TEST_CASE("hiv conversion appends constant parameters") {
    OdeModel m = builtin("hiv");
    CHECK(m.state == std::vector<std::string>{"T_U", "T_I", "V", "lambda", "rho", "delta", "N",
                                              "c"});
    CHECK(m.mu() == 0);
    CHECK(m.mw() == 1);
    CHECK(m.unknown_inputs == std::vector<std::string>{"eta"});
    CHECK(m.ui_origin.at("eta").derivative_order == 0);
    // g^1 = [-T_U V, T_U V, 0, ..., 0]
    CHECK(is_identically_zero(add2(m.g[0][0], parse("T_U*V"))));
    CHECK(is_identically_zero(sub(m.g[0][1], parse("T_U*V"))));
    for (int i = 2; i < 8; ++i) CHECK(m.g[0][i].is_zero());
    // drift per the model equations
    CHECK(is_identically_zero(sub(m.g0[0], parse("lambda - rho*T_U"))));
    CHECK(is_identically_zero(sub(m.g0[2], parse("N*delta*T_I - c*V"))));
    for (int i = 3; i < 8; ++i) CHECK(m.g0[i].is_zero());
    CHECK(m.scenarios.count("paper") == 1);
    CHECK(m.scenarios.at("paper").initial.at("V") == doctest::Approx(1e5));
    CHECK(m.scenarios.at("paper").params.at("rho") == doctest::Approx(0.108));
}

TEST_CASE("seiar outputs and dimensions") {
    OdeModel m = builtin("seiar");
    CHECK(m.n() == 9);
    CHECK(m.p() == 3);
    CHECK(is_identically_zero(sub(m.outputs[0], make_var("I"))));
    CHECK(is_identically_zero(sub(m.outputs[1], make_var("A"))));
    CHECK(is_identically_zero(sub(m.outputs[2], parse("S + E + R"))));
    CHECK(m.unknown_inputs == std::vector<std::string>{"beta"});
}

TEST_CASE("affine input-free models convert to themselves") {
    OdeModel m = builtin("unicycle_s1");
    CHECK(m.state == std::vector<std::string>{"rho", "phi", "theta"});
    CHECK(m.known_inputs == std::vector<std::string>{"v"});
    CHECK(m.unknown_inputs == std::vector<std::string>{"omega"});
    CHECK(is_identically_zero(sub(m.f[0][0], parse("cos(theta - phi)"))));
    CHECK(is_identically_zero(sub(m.f[0][1], parse("sin(theta - phi)/rho"))));
    CHECK(m.f[0][2].is_zero());
    CHECK(m.g[0][0].is_zero());
    CHECK(m.g[0][1].is_zero());
    CHECK(m.g[0][2].is_one());
    for (const auto& e : m.g0) CHECK(e.is_zero());

    // second scenario swaps the roles
    OdeModel m2 = builtin("unicycle_s2");
    CHECK(m2.f[0][2].is_one());
    CHECK(is_identically_zero(sub(m2.g[0][0], parse("cos(theta - phi)"))));
}

TEST_CASE("model JSON rejects unknown keys and undeclared symbols") {
    CHECK_THROWS_AS(model_from_json_text("{\"bogus\": 1}"), ModelValidationError);
    CHECK_THROWS_AS(model_from_json_text("not json"), ModelValidationError);
    const char* undeclared = R"({
      "name": "bad", "states": ["x"], "dynamics": {"x": "x + y"}, "outputs": ["x"]
    })";
    CHECK_THROWS_AS(model_from_json_text(undeclared), ModelValidationError);
    const char* dup = R"({
      "name": "bad", "states": ["x"], "constant_params": ["x"],
      "dynamics": {"x": "x"}, "outputs": ["x"]
    })";
    CHECK_THROWS_AS(model_from_json_text(dup), ModelValidationError);
}

TEST_CASE("outputs referencing inputs are rejected") {
    const char* text = R"({
      "name": "bad", "states": ["x"], "known_inputs": ["u"],
      "dynamics": {"x": "u"}, "outputs": ["x + u"]
    })";
    CHECK_THROWS_AS(to_affine(model_from_json_text(text)), NonAffineOutput);
}

TEST_CASE("unknown builtin name") { CHECK_THROWS_AS(builtin("nope"), UnknownModel); }

TEST_CASE("affinity detection is structural") {
    CHECK(is_affine_in(parse("a*u + b"), {"u"}));
    CHECK(is_affine_in(parse("a*u + b*w"), {"u", "w"}));
    CHECK_FALSE(is_affine_in(parse("u^2"), {"u"}));
    CHECK_FALSE(is_affine_in(parse("u*w"), {"u", "w"}));
    CHECK_FALSE(is_affine_in(parse("sin(u)"), {"u"}));
}
