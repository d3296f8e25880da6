#include "chag/parallel/weights_io.hpp"

#include <charconv>
#include <sstream>

namespace chag {

void write_weights_csv(std::ostream& os, const ParamStore& params) {
  os << "name,shape,values\n";
  char buf[64];
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& info = params.infos()[i];
    os << info.name << ',';
    for (std::size_t d = 0; d < info.shape.size(); ++d) os << (d ? "x" : "") << info.shape[d];
    os << ',';
    bool first = true;
    for (double v : params.tensors()[i].data()) {
      auto res = std::to_chars(buf, buf + sizeof buf, v);
      if (!first) os << ' ';
      os.write(buf, res.ptr - buf);
      first = false;
    }
    os << '\n';
  }
}

std::vector<WeightRecord> read_weights_csv(std::istream& is) {
  std::vector<WeightRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (lineno == 1 && line.starts_with("name,")) continue;
    if (line.empty()) continue;
    auto c1 = line.find(','), c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw ConfigError("weights csv line " + std::to_string(lineno) + ": expected name,shape,values");
    WeightRecord r;
    r.name = line.substr(0, c1);
    std::string shape = line.substr(c1 + 1, c2 - c1 - 1);
    std::size_t pos = 0;
    while (pos <= shape.size() && !shape.empty()) {
      auto x = shape.find('x', pos);
      std::string part = shape.substr(pos, x == std::string::npos ? std::string::npos : x - pos);
      std::size_t dim = 0;
      auto res = std::from_chars(part.data(), part.data() + part.size(), dim);
      if (res.ec != std::errc() || res.ptr != part.data() + part.size())
        throw ConfigError("weights csv line " + std::to_string(lineno) + ": bad shape '" + shape + "'");
      r.shape.push_back(dim);
      if (x == std::string::npos) break;
      pos = x + 1;
    }
    const char* p = line.data() + c2 + 1;
    const char* end = line.data() + line.size();
    while (p < end) {
      while (p < end && *p == ' ') ++p;
      if (p == end) break;
      double v = 0.0;
      auto res = std::from_chars(p, end, v);
      if (res.ec != std::errc())
        throw ConfigError("weights csv line " + std::to_string(lineno) + ": bad value");
      r.values.push_back(v);
      p = res.ptr;
    }
    if (r.values.size() != shape_numel(r.shape))
      throw ConfigError("weights csv line " + std::to_string(lineno) + ": " + r.name + " has " +
                        std::to_string(r.values.size()) + " values for shape " + shape);
    out.push_back(std::move(r));
  }
  return out;
}

void load_weights(ParamStore& params, const std::vector<WeightRecord>& records) {
  for (const auto& r : records) {
    Tensor t = params.get(r.name);
    if (t.shape() != r.shape)
      throw ConfigError("weights: " + r.name + " has shape " + shape_str(r.shape) + ", expected " +
                        shape_str(t.shape()));
    std::copy(r.values.begin(), r.values.end(), t.mutable_data().begin());
  }
}

}  // namespace chag
