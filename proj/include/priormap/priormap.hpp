// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "priormap/errors.hpp"
#include "priormap/rng.hpp"
#include "priormap/vector_core.hpp"
#include "priormap/map_io.hpp"
#include "priormap/tensor.hpp"
#include "priormap/uve.hpp"
#include "priormap/pretrain.hpp"
#include "priormap/checkpoint.hpp"
#include "priormap/prior_fusion.hpp"
#include "priormap/map_eval.hpp"
#include "priormap/map_tools.hpp"
