#ifndef CAPSTRAIN_PARETO_HPP
#define CAPSTRAIN_PARETO_HPP

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace capstrain {

/// One trained configuration in (accuracy, training time, parameter count) space.
struct ExperimentPoint {
  std::string label;
  double accuracy = 0.0;       // fraction, maximised
  double training_time = 0.0;  // seconds, minimised
  double parameters = 0.0;     // count, minimised

  /// Throws RangeError unless all coordinates are finite and positive.
  void validate() const;
  friend bool operator==(const ExperimentPoint&, const ExperimentPoint&) = default;
};

/// q dominates p: no worse on every axis and strictly better on at least one.
bool dominates(const ExperimentPoint& q, const ExperimentPoint& p);

/// Non-dominated subset ordered by descending accuracy (input order on ties).
std::vector<ExperimentPoint> pareto_front(std::span<const ExperimentPoint> points);

/// label,accuracy,training_time,parameters with round-trip number formatting.
void write_points_csv(std::ostream& os, std::span<const ExperimentPoint> points);
std::vector<ExperimentPoint> read_points_csv(std::istream& is);

}  // namespace capstrain

#endif  // CAPSTRAIN_PARETO_HPP
