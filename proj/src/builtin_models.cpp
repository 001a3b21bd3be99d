#include "odeid/model.hpp"

namespace odeid {

namespace {

const char* kUnicycleS1 = R"json({
  "name": "unicycle_s1",
  "states": ["rho", "phi", "theta"],
  "known_inputs": ["v"],
  "unknown_inputs": ["omega"],
  "dynamics": {
    "rho": "v*cos(theta - phi)",
    "phi": "v*sin(theta - phi)/rho",
    "theta": "omega"
  },
  "outputs": ["phi - theta"],
  "scenarios": {
    "nominal": {
      "initial": {"rho": 2.0, "phi": 0.3, "theta": 0.9},
      "tv_profiles": {"v": "1 + t/10", "omega": "0.5"},
      "t_span": [0, 5]
    }
  }
})json";

const char* kUnicycleS2 = R"json({
  "name": "unicycle_s2",
  "states": ["rho", "phi", "theta"],
  "known_inputs": ["omega"],
  "unknown_inputs": ["v"],
  "dynamics": {
    "rho": "v*cos(theta - phi)",
    "phi": "v*sin(theta - phi)/rho",
    "theta": "omega"
  },
  "outputs": ["phi - theta"],
  "scenarios": {
    "nominal": {
      "initial": {"rho": 2.0, "phi": 0.3, "theta": 0.9},
      "tv_profiles": {"omega": "0.5", "v": "1 + 0.2*sin(t)"},
      "t_span": [0, 5]
    }
  }
})json";

const char* kHiv = R"json({
  "name": "hiv",
  "states": ["T_U", "T_I", "V"],
  "tv_params": ["eta"],
  "constant_params": ["lambda", "rho", "delta", "N", "c"],
  "dynamics": {
    "T_U": "lambda - rho*T_U - eta*T_U*V",
    "T_I": "eta*T_U*V - delta*T_I",
    "V": "N*delta*T_I - c*V"
  },
  "outputs": ["V", "T_U + T_I"],
  "scenarios": {
    "paper": {
      "initial": {"T_U": 600, "T_I": 0, "V": 1e5},
      "params": {"lambda": 36, "rho": 0.108, "delta": 0.5, "N": 1000, "c": 3},
      "tv_profiles": {"eta": "0.00009*(1 - 0.9*cos(0.0031415926535897932*t))"},
      "t_span": [0, 201]
    },
    "ti0pos": {
      "initial": {"T_U": 600, "T_I": 20, "V": 1e5},
      "params": {"lambda": 36, "rho": 0.108, "delta": 0.5, "N": 1000, "c": 3},
      "tv_profiles": {"eta": "0.00009*(1 - 0.9*cos(0.0031415926535897932*t))"},
      "t_span": [0, 201]
    }
  }
})json";

const char* kSeiar = R"json({
  "name": "seiar",
  "states": ["S", "E", "I", "A", "R"],
  "tv_params": ["beta"],
  "constant_params": ["mu1", "mu2", "gamma", "p"],
  "dynamics": {
    "S": "-beta*S*(I + A)",
    "E": "beta*S*(I + A) - gamma*E",
    "I": "gamma*p*E - mu1*I",
    "A": "gamma*(1 - p)*E - mu2*A",
    "R": "mu1*I + mu2*A"
  },
  "outputs": ["I", "A", "S + E + R"],
  "scenarios": {
    "beta_const": {
      "initial": {"S": 0.9999999999, "E": 0, "I": 1e-10, "A": 0, "R": 0},
      "params": {"mu1": 0.3333333333333333, "mu2": 0.1, "gamma": 0.25, "p": 0.14},
      "tv_profiles": {"beta": "1"},
      "t_span": [0, 200]
    },
    "beta_cos": {
      "initial": {"S": 0.9999999999, "E": 0, "I": 1e-10, "A": 0, "R": 0},
      "params": {"mu1": 0.3333333333333333, "mu2": 0.1, "gamma": 0.25, "p": 0.14},
      "tv_profiles": {"beta": "cos(0.0078539816339744831*t)"},
      "t_span": [0, 200]
    }
  }
})json";

const char* kToggle = R"json({
  "name": "toggle",
  "states": ["x1", "x2"],
  "tv_params": ["W1", "W2"],
  "constant_params": ["k01", "k1", "n1", "k02", "k2", "n2"],
  "dynamics": {
    "x1": "k01 + k1/(1 + (x2/W1)^n1) - x1",
    "x2": "k02 + k2/(1 + (x1/W2)^n2) - x2"
  },
  "outputs": ["x1", "x2"],
  "scenarios": {
    "nominal": {
      "initial": {"x1": 1.5, "x2": 2.5},
      "params": {"k01": 0.25, "k1": 4, "n1": 2, "k02": 0.2, "k2": 3, "n2": 3},
      "tv_profiles": {"W1": "1.5 + t/20", "W2": "1 + t/40"},
      "t_span": [0, 10]
    }
  }
})json";

}  // namespace

std::vector<std::string> builtin_names() {
    return {"unicycle_s1", "unicycle_s2", "hiv", "seiar", "toggle"};
}

GeneralModel builtin_general(const std::string& name) {
    const char* text = nullptr;
    if (name == "unicycle_s1") text = kUnicycleS1;
    else if (name == "unicycle_s2") text = kUnicycleS2;
    else if (name == "hiv") text = kHiv;
    else if (name == "seiar") text = kSeiar;
    else if (name == "toggle") text = kToggle;
    if (!text) throw UnknownModel(name);
    return model_from_json_text(text);
}

OdeModel builtin(const std::string& name) { return to_affine(builtin_general(name)); }

}  // namespace odeid
