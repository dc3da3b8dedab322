#pragma once

// Convenience umbrella: the full category-level transparent-object pose
// estimation stack.

#include "transnet/common.hpp"
#include "transnet/config.hpp"
#include "transnet/dataio.hpp"
#include "transnet/geometry.hpp"
#include "transnet/gpc.hpp"
#include "transnet/losses.hpp"
#include "transnet/metrics.hpp"
#include "transnet/model.hpp"
#include "transnet/patch.hpp"
#include "transnet/pipeline.hpp"
#include "transnet/rng.hpp"
#include "transnet/stage1.hpp"
#include "transnet/synth.hpp"
#include "transnet/tensor.hpp"
