// Copyright 2026 The dorlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "dorlab/checkpoint.hpp"
#include "dorlab/common.hpp"
#include "dorlab/divergence.hpp"
#include "dorlab/embedding_store.hpp"
#include "dorlab/harness.hpp"
#include "dorlab/metrics.hpp"
#include "dorlab/miniclip.hpp"
#include "dorlab/outlier_pool.hpp"
#include "dorlab/theory.hpp"
#include "dorlab/trainer.hpp"
#include "dorlab/world.hpp"
