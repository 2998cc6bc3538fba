#include "capstrain/pareto.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fmt/format.h>
#include <istream>
#include <ostream>

#include "capstrain/errors.hpp"

namespace capstrain {
namespace {

constexpr std::string_view kHeader = "label,accuracy,training_time,parameters";

double parse_number(std::string_view text, std::size_t line) {
  double value = 0.0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw FormatError(fmt::format("line {}: '{}' is not a number", line, text));
  }
  return value;
}

}  // namespace

void ExperimentPoint::validate() const {
  for (double v : {accuracy, training_time, parameters}) {
    if (!std::isfinite(v) || v <= 0.0) {
      throw RangeError(fmt::format("point '{}' needs finite positive coordinates", label));
    }
  }
}

bool dominates(const ExperimentPoint& q, const ExperimentPoint& p) {
  const bool no_worse = q.accuracy >= p.accuracy && q.training_time <= p.training_time && q.parameters <= p.parameters;
  const bool better = q.accuracy > p.accuracy || q.training_time < p.training_time || q.parameters < p.parameters;
  return no_worse && better;
}

std::vector<ExperimentPoint> pareto_front(std::span<const ExperimentPoint> points) {
  if (points.empty()) throw RangeError("pareto_front needs at least one point");
  std::vector<std::size_t> order(points.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return points[a].accuracy > points[b].accuracy; });
  std::vector<ExperimentPoint> front;
  for (std::size_t idx : order) {
    const ExperimentPoint& p = points[idx];
    bool dominated = false;
    for (std::size_t j = 0; j < points.size() && !dominated; ++j) {
      dominated = dominates(points[j], p);
    }
    if (!dominated) front.push_back(p);
  }
  return front;
}

void write_points_csv(std::ostream& os, std::span<const ExperimentPoint> points) {
  os << kHeader << '\n';
  for (const auto& p : points) {
    if (p.label.find_first_of(",\n\r") != std::string::npos) {
      throw FormatError("point label '" + p.label + "' contains a separator");
    }
    os << fmt::format("{},{},{},{}\n", p.label, p.accuracy, p.training_time, p.parameters);
  }
}

std::vector<ExperimentPoint> read_points_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kHeader) throw FormatError("points CSV must start with its header");
  std::vector<ExperimentPoint> out;
  std::size_t number = 1;
  while (std::getline(is, line)) {
    ++number;
    if (line.empty()) continue;
    std::vector<std::string_view> fields;
    std::string_view rest(line);
    for (std::size_t pos; (pos = rest.find(',')) != std::string_view::npos; rest.remove_prefix(pos + 1)) {
      fields.push_back(rest.substr(0, pos));
    }
    fields.push_back(rest);
    if (fields.size() != 4) throw FormatError(fmt::format("line {}: expected 4 fields", number));
    out.push_back({std::string(fields[0]), parse_number(fields[1], number), parse_number(fields[2], number),
                   parse_number(fields[3], number)});
  }
  return out;
}

}  // namespace capstrain
