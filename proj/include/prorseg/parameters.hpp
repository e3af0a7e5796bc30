#pragma once

#include <string>
#include <vector>

#include "prorseg/tensor.hpp"

namespace prorseg {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedParameter>;

inline void append_prefixed(ParameterList& out, const std::string& prefix, const ParameterList& in) {
  for (const auto& p : in) out.push_back({prefix + p.name, p.tensor});
}

inline void zero_grads(const ParameterList& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

}  // namespace prorseg
