// Copyright 2026 The Trajformer Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


// Umbrella header.

#pragma once

#include "trajformer/bench.hpp"
#include "trajformer/checkpoint.hpp"
#include "trajformer/config.hpp"
#include "trajformer/data.hpp"
#include "trajformer/errors.hpp"
#include "trajformer/metrics.hpp"
#include "trajformer/model.hpp"
#include "trajformer/ops.hpp"
#include "trajformer/optim.hpp"
#include "trajformer/random.hpp"
#include "trajformer/tensor.hpp"
#include "trajformer/training.hpp"
