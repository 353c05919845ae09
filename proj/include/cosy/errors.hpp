#pragma once

#include <stdexcept>
#include <string>

namespace cosy {

// Bad or missing input data: unreadable files, schema violations, missing
// prerequisite artifacts. The CLI maps these to exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cosy
