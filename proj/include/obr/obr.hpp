// Copyright (c) 2026 The OBR Authors. All Rights Reserved.
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

#pragma once

#include "obr/calibration.hpp"
#include "obr/compensation.hpp"
#include "obr/container.hpp"
#include "obr/errors.hpp"
#include "obr/evaluation.hpp"
#include "obr/linalg.hpp"
#include "obr/masking.hpp"
#include "obr/matrix.hpp"
#include "obr/pipeline.hpp"
#include "obr/quantizer.hpp"
#include "obr/rng.hpp"
#include "obr/rotation.hpp"
