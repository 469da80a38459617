// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "robustseg/errors.hpp"
#include "robustseg/rng.hpp"
#include "robustseg/tensor.hpp"
#include "robustseg/rmt_io.hpp"
#include "robustseg/synth_data.hpp"
#include "robustseg/subsets.hpp"
#include "robustseg/seg_model.hpp"
#include "robustseg/checkpoint.hpp"
#include "robustseg/distill_core.hpp"
#include "robustseg/hpdm.hpp"
#include "robustseg/rrm.hpp"
#include "robustseg/metrics.hpp"
#include "robustseg/robustness_eval.hpp"
#include "robustseg/optimizer.hpp"
#include "robustseg/config.hpp"
#include "robustseg/pipeline.hpp"
