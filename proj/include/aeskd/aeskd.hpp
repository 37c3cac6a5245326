// Copyright 2026 The aeskd Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


// Umbrella header.

#pragma once

#include "aeskd/tensor.hpp"
#include "aeskd/autograd.hpp"
#include "aeskd/gradcheck.hpp"
#include "aeskd/nn.hpp"
#include "aeskd/optim.hpp"
#include "aeskd/io.hpp"
#include "aeskd/ratings.hpp"
#include "aeskd/losses.hpp"
#include "aeskd/synthcorpus.hpp"
#include "aeskd/backbones.hpp"
#include "aeskd/distillation.hpp"
#include "aeskd/evaluation.hpp"
#include "aeskd/experiment.hpp"
#include "aeskd/tables.hpp"
