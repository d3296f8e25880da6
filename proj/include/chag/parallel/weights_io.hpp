#pragma once

#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "chag/model/params.hpp"

namespace chag {

struct WeightRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// One row per parameter: name,shape,values with shape as "2x3" and values
/// space-separated in shortest round-trip form.
void write_weights_csv(std::ostream& os, const ParamStore& params);
std::vector<WeightRecord> read_weights_csv(std::istream& is);
/// Overwrites `params` from records; names and shapes must match.
void load_weights(ParamStore& params, const std::vector<WeightRecord>& records);

}  // namespace chag
