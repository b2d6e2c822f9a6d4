#pragma once

#include "nvel/config.hpp"
#include "nvel/error.hpp"
#include "nvel/eval_stats.hpp"
#include "nvel/field_grid.hpp"
#include "nvel/field_model.hpp"
#include "nvel/image.hpp"
#include "nvel/synth.hpp"
#include "nvel/trainer.hpp"
#include "nvel/warp_loss.hpp"

namespace nvel {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace nvel
