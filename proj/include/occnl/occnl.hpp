#pragma once

#include "occnl/candidates.hpp"
#include "occnl/checkpoint.hpp"
#include "occnl/config.hpp"
#include "occnl/errors.hpp"
#include "occnl/features.hpp"
#include "occnl/io.hpp"
#include "occnl/learner.hpp"
#include "occnl/loss.hpp"
#include "occnl/matrix.hpp"
#include "occnl/metrics.hpp"
#include "occnl/noise.hpp"
#include "occnl/pipeline.hpp"
#include "occnl/rng.hpp"
#include "occnl/scene.hpp"
#include "occnl/voxel.hpp"
