// JSON conversions shared by the dataset, checkpoint and report writers.
#pragma once

#include "aqnode/datagen.hpp"
#include "aqnode/model.hpp"
#include "aqnode/nn.hpp"

#include <json.hpp>

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace aqnode::detail {

using nlohmann::json;

inline json to_json(const SystemParams& p) {
  return {{"alpha", p.alpha}, {"r", p.r},         {"m", p.m_strength},
          {"omega0", p.omega0}, {"zeta", p.zeta}, {"kbt", p.kbt}};
}

inline SystemParams params_from_json(const json& j) {
  SystemParams p;
  p.alpha = j.at("alpha").get<double>();
  p.r = j.at("r").get<double>();
  p.m_strength = j.at("m").get<double>();
  p.omega0 = j.at("omega0").get<double>();
  p.zeta = j.at("zeta").get<double>();
  p.kbt = j.at("kbt").get<double>();
  return p;
}

inline json to_json(const TimeGrid& g) {
  return {{"t0", g.t0}, {"t1", g.t1}, {"n_steps", g.n_steps}};
}

inline TimeGrid grid_from_json(const json& j) {
  return TimeGrid(j.at("t0").get<double>(), j.at("t1").get<double>(), j.at("n_steps").get<int>());
}

inline json to_json(const Interval& i) { return json::array({i.lo, i.hi}); }
inline Interval interval_from_json(const json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>()};
}

inline json to_json(const PhaseRegime& r) {
  return {{"phase", r.phase},         {"split", to_string(r.split)},
          {"alpha", to_json(r.alpha)}, {"r", to_json(r.r)},
          {"m", to_json(r.m_strength)}, {"omega0", to_json(r.omega0)},
          {"zeta", r.zeta},           {"kbt", r.kbt}};
}

inline PhaseRegime regime_from_json(const json& j) {
  PhaseRegime r;
  r.phase = j.at("phase").get<int>();
  r.split = split_from_string(j.at("split").get<std::string>());
  r.alpha = interval_from_json(j.at("alpha"));
  r.r = interval_from_json(j.at("r"));
  r.m_strength = interval_from_json(j.at("m"));
  r.omega0 = interval_from_json(j.at("omega0"));
  r.zeta = j.at("zeta").get<double>();
  r.kbt = j.at("kbt").get<double>();
  return r;
}

inline json to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector vector_from_json(const json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

inline json to_json(const SignalSpec& s) {
  return {{"mode", to_string(s.mode)},
          {"time_scale", s.time_scale},
          {"dy_scale", s.dy_scale},
          {"u_scale", s.u_scale}};
}

inline SignalSpec signal_spec_from_json(const json& j) {
  SignalSpec s;
  s.mode = signal_mode_from_string(j.at("mode").get<std::string>());
  s.time_scale = j.at("time_scale").get<double>();
  s.dy_scale = j.at("dy_scale").get<double>();
  s.u_scale = j.at("u_scale").get<double>();
  return s;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "' for reading");
  return is;
}

}  // namespace aqnode::detail
