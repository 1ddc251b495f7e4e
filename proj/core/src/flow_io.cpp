#include "svflow/flow.hpp"

#include <json.hpp>

namespace svflow {

using nlohmann::json;

std::string flow_model_to_json(const FlowModel& m) {
  json doc;
  doc["family"] = to_string(m.family());
  doc["dim"] = m.dim();
  doc["L"] = m.num_steps();
  doc["h"] = m.step_size();
  doc["num_components"] = m.num_components();
  doc["posterior_mode"] = to_string(m.posterior_mode());
  json theta = json::array();
  json phi = json::array();
  for (std::size_t l = 0; l < m.num_steps(); ++l) {
    json row = json::array();
    for (std::size_t z = 0; z < m.num_components(); ++z) {
      for (double v : m.theta(l, z)) row.push_back(v);
    }
    theta.push_back(std::move(row));
    json prow = json::array();
    if (m.posterior_mode() == PosteriorMode::untied) {
      for (std::size_t z = 0; z < m.num_components(); ++z) {
        for (double v : m.phi(l, z)) prow.push_back(v);
      }
    }
    phi.push_back(std::move(prow));
  }
  doc["theta"] = std::move(theta);
  doc["phi"] = std::move(phi);
  return doc.dump(2);
}

FlowModel flow_model_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("flow model JSON: ") + e.what());
  }
  try {
    FlowModel m(family_from_string(doc.at("family").get<std::string>()), doc.at("dim").get<std::size_t>(),
                doc.at("num_components").get<std::size_t>(), doc.at("L").get<std::size_t>(),
                doc.at("h").get<double>(), posterior_mode_from_string(doc.at("posterior_mode").get<std::string>()));
    const auto& theta = doc.at("theta");
    const auto& phi = doc.at("phi");
    if (theta.size() != m.num_steps() || phi.size() != m.num_steps()) {
      throw ConfigError("flow model JSON: theta/phi must have exactly L rows");
    }
    const std::size_t tb = m.theta_block_size() * m.num_components();
    const std::size_t pb = m.phi_block_size() * m.num_components();
    for (std::size_t l = 0; l < m.num_steps(); ++l) {
      if (theta[l].size() != tb || phi[l].size() != pb) {
        throw ConfigError("flow model JSON: row " + std::to_string(l) + " has the wrong length");
      }
      for (std::size_t j = 0; j < tb; ++j) m.theta_data()[l * tb + j] = theta[l][j].get<double>();
      for (std::size_t j = 0; j < pb; ++j) m.phi_data()[l * pb + j] = phi[l][j].get<double>();
    }
    m.validate();
    return m;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("flow model JSON: ") + e.what());
  }
}

}  // namespace svflow
