#ifndef CAPSTRAIN_ERRORS_HPP
#define CAPSTRAIN_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace capstrain {

/// Incompatible tensor extents.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument outside its admissible range (schedule step, epoch, subset size).
class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Misuse of the autodiff tape: foreign handles, non-scalar loss, double backward.
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed IDX or checkpoint bytes.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dataset files absent from the data directory.
class MissingDataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss during training.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace capstrain

#endif  // CAPSTRAIN_ERRORS_HPP
