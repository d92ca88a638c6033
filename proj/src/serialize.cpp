#include "trj/serialize.hpp"

#include "trj/flow.hpp"

#include <fstream>

namespace trj {

using nlohmann::json;

namespace {

constexpr int kVersion = 1;

json row_major(const Mat& m) {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) flat.push_back(m(r, c));
  }
  return flat;
}

Mat from_row_major(const json& j, Eigen::Index rows, Eigen::Index cols, const char* what) {
  const auto flat = j.get<std::vector<double>>();
  if (flat.size() != static_cast<std::size_t>(rows * cols)) {
    throw std::runtime_error(std::string("map file: '") + what + "' has wrong length");
  }
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = flat[static_cast<std::size_t>(r * cols + c)];
  }
  return m;
}

json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vec vec_from(const json& j, Eigen::Index n, const char* what) {
  const Mat m = from_row_major(j, n, 1, what);
  return m.col(0);
}

json flow_params_json(const FlowParams& p) {
  json layers = json::array();
  for (const auto& l : p.layers) {
    layers.push_back({{"order", l.order},
                      {"w1", row_major(l.w1)},
                      {"b1", vec_json(l.b1)},
                      {"w2", row_major(l.w2)},
                      {"b2", vec_json(l.b2)},
                      {"w3", row_major(l.w3)},
                      {"b3", vec_json(l.b3)}});
  }
  json out{{"bins", p.bins},
           {"hidden", p.hidden()},
           {"contexts", p.contexts},
           {"layers", layers},
           {"shift", row_major(p.shift)},
           {"scale", row_major(p.scale)}};
  if (p.conditional) {
    std::vector<int> mask;
    for (const auto& row : p.aux_mask) {
      for (bool b : row) mask.push_back(b ? 1 : 0);
    }
    out["aux_mask"] = mask;
    out["nu_scale"] = p.nu.scale();
    out["base_mean"] = row_major(p.base_mean);
    out["base_log_scale"] = row_major(p.base_log_scale);
  }
  return out;
}

FlowParams flow_params_from(const json& j, std::size_t n, bool conditional) {
  FlowParams p;
  p.n = n;
  p.conditional = conditional;
  p.bins = j.at("bins").get<std::size_t>();
  p.contexts = j.at("contexts").get<std::size_t>();
  const auto hidden = j.at("hidden").get<std::size_t>();
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(p.contexts);
  const auto H = static_cast<Eigen::Index>(hidden);
  const auto out_dim = static_cast<Eigen::Index>(n * p.raw_per_coord());
  const auto in_dim = static_cast<Eigen::Index>(p.input_dim());
  for (const auto& lj : j.at("layers")) {
    MadeLayer l;
    l.order = lj.at("order").get<std::vector<std::size_t>>();
    if (l.order.size() != n) throw std::runtime_error("map file: layer order has wrong length");
    build_made_masks(l, n, p.contexts, conditional, hidden, p.raw_per_coord());
    l.w1 = from_row_major(lj.at("w1"), H, in_dim, "w1");
    l.b1 = vec_from(lj.at("b1"), H, "b1");
    l.w2 = from_row_major(lj.at("w2"), H, H, "w2");
    l.b2 = vec_from(lj.at("b2"), H, "b2");
    l.w3 = from_row_major(lj.at("w3"), out_dim, H, "w3");
    l.b3 = vec_from(lj.at("b3"), out_dim, "b3");
    p.layers.push_back(std::move(l));
  }
  p.shift = from_row_major(j.at("shift"), N, K, "shift");
  p.scale = from_row_major(j.at("scale"), N, K, "scale");
  p.base_mean = Mat::Zero(N, K);
  p.base_log_scale = Mat::Zero(N, K);
  if (conditional) {
    const auto mask = j.at("aux_mask").get<std::vector<int>>();
    if (mask.size() != n * p.contexts) throw std::runtime_error("map file: aux_mask has wrong length");
    p.aux_mask.assign(p.contexts, std::vector<bool>(n));
    for (std::size_t k = 0; k < p.contexts; ++k) {
      for (std::size_t i = 0; i < n; ++i) p.aux_mask[k][i] = mask[k * n + i] != 0;
    }
    p.nu = Reference(j.at("nu_scale").get<double>());
    p.base_mean = from_row_major(j.at("base_mean"), N, K, "base_mean");
    p.base_log_scale = from_row_major(j.at("base_log_scale"), N, K, "base_log_scale");
  }
  return p;
}

json envelope(std::string_view kind, std::size_t n, json params) {
  return {{"format", "trj-map"}, {"version", kVersion}, {"kind", kind}, {"n", n}, {"params", std::move(params)}};
}

void check_envelope(const json& j) {
  if (j.value("format", "") != "trj-map") throw std::runtime_error("map file: missing format tag 'trj-map'");
  if (j.value("version", 0) != kVersion) throw std::runtime_error("map file: unsupported version");
}

}  // namespace

json map_to_json(const TransportMap& map) {
  const std::size_t n = map.dim();
  switch (map.kind()) {
    case MapKind::Identity:
      return envelope("identity", n, json::object());
    case MapKind::ExactSas: {
      const auto& p = dynamic_cast<const SasMap&>(map).params();
      return envelope("exact-sas", n, {{"epsilon", vec_json(p.epsilon)}, {"delta", vec_json(p.delta)}, {"chol", row_major(p.chol)}});
    }
    case MapKind::Affine: {
      const auto& a = dynamic_cast<const AffineMap&>(map);
      return envelope("affine", n, {{"center", vec_json(a.center())}, {"chol", row_major(a.chol())}});
    }
    case MapKind::LogPositive: {
      std::vector<int> flags;
      for (bool b : dynamic_cast<const LogPositiveMap&>(map).positive()) flags.push_back(b ? 1 : 0);
      return envelope("log-positive", n, {{"positive", flags}});
    }
    case MapKind::SplineFlow:
      return envelope("spline-flow", n, flow_params_json(dynamic_cast<const SplineFlowMap&>(map).params()));
    case MapKind::Composition: {
      json stages = json::array();
      for (const auto& s : dynamic_cast<const CompositionMap&>(map).stages()) stages.push_back(map_to_json(*s));
      return envelope("composition", n, {{"stages", stages}});
    }
  }
  throw std::logic_error("map_to_json: unknown kind");
}

MapPtr map_from_json(const json& j) {
  check_envelope(j);
  const auto kind = j.at("kind").get<std::string>();
  const auto n = j.at("n").get<std::size_t>();
  const auto N = static_cast<Eigen::Index>(n);
  const json& p = j.at("params");
  if (kind == "identity") return std::make_shared<IdentityMap>(n);
  if (kind == "exact-sas") {
    return make_sas_map(vec_from(p.at("epsilon"), N, "epsilon"), vec_from(p.at("delta"), N, "delta"),
                        from_row_major(p.at("chol"), N, N, "chol"));
  }
  if (kind == "affine") {
    return std::make_shared<AffineMap>(vec_from(p.at("center"), N, "center"), from_row_major(p.at("chol"), N, N, "chol"));
  }
  if (kind == "log-positive") {
    const auto flags = p.at("positive").get<std::vector<int>>();
    if (flags.size() != n) throw std::runtime_error("map file: 'positive' has wrong length");
    std::vector<bool> pos(flags.begin(), flags.end());
    return std::make_shared<LogPositiveMap>(std::move(pos));
  }
  if (kind == "spline-flow") return std::make_shared<SplineFlowMap>(flow_params_from(p, n, false));
  if (kind == "composition") {
    std::vector<MapPtr> stages;
    for (const auto& s : p.at("stages")) stages.push_back(map_from_json(s));
    return std::make_shared<CompositionMap>(std::move(stages));
  }
  throw std::runtime_error("map file: unknown kind '" + kind + "'");
}

json conditional_map_to_json(const ConditionalMap& map) {
  if (const auto* f = dynamic_cast<const ConditionalFlowMap*>(&map)) {
    return envelope("conditional-flow", f->dim(), flow_params_json(f->params()));
  }
  if (dynamic_cast<const IdentityConditionalMap*>(&map) != nullptr) {
    return envelope("identity-conditional", map.dim(), {{"contexts", map.contexts()}});
  }
  throw std::invalid_argument("conditional_map_to_json: unsupported conditional map type");
}

ConditionalMapPtr conditional_map_from_json(const json& j) {
  check_envelope(j);
  const auto kind = j.at("kind").get<std::string>();
  const auto n = j.at("n").get<std::size_t>();
  const json& p = j.at("params");
  if (kind == "conditional-flow") return std::make_shared<ConditionalFlowMap>(flow_params_from(p, n, true));
  if (kind == "identity-conditional") {
    return std::make_shared<IdentityConditionalMap>(n, p.at("contexts").get<std::size_t>());
  }
  throw std::runtime_error("map file: unknown conditional kind '" + kind + "'");
}

namespace {

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open map file " + path.string());
  return json::parse(in);
}

void write_json(const json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write map file " + path.string());
  out << j.dump() << '\n';
}

}  // namespace

void save_map(const TransportMap& map, const std::filesystem::path& path) { write_json(map_to_json(map), path); }
MapPtr load_map(const std::filesystem::path& path) { return map_from_json(read_json(path)); }
void save_conditional_map(const ConditionalMap& map, const std::filesystem::path& path) {
  write_json(conditional_map_to_json(map), path);
}
ConditionalMapPtr load_conditional_map(const std::filesystem::path& path) {
  return conditional_map_from_json(read_json(path));
}

}  // namespace trj
