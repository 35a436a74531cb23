#pragma once

#include <cstdint>

namespace ebtc {

// IEEE 754 binary16 conversions, round-to-nearest-even, with inf/nan/subnormal handling.
std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t bits);

inline float round_to_half(float value) { return half_to_float(float_to_half(value)); }

}  // namespace ebtc
