// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "mhmoe/budget.hpp"
#include "mhmoe/gradcheck.hpp"
#include "mhmoe/graph.hpp"
#include "mhmoe/layers.hpp"
#include "mhmoe/model.hpp"
#include "mhmoe/model_config.hpp"
#include "mhmoe/optimizer.hpp"
#include "mhmoe/parameters.hpp"
#include "mhmoe/random.hpp"
#include "mhmoe/routing.hpp"
#include "mhmoe/telemetry.hpp"
#include "mhmoe/tensor.hpp"
