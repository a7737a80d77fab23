#pragma once

// CSV number formatting: all floats serialize with 9 significant digits so
// logs are bit-comparable across identical runs.

#include <cstdio>
#include <string>

namespace stn {

inline std::string csv_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace stn
