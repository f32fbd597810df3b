// corvol.hpp - umbrella header.
#pragma once

#include "core.hpp"
#include "volume.hpp"
#include "fields.hpp"
#include "sphere.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "synth.hpp"
#include "optimize.hpp"
#include "io.hpp"

namespace corvol {
inline constexpr const char *kVersion = "0.1.0";
}
