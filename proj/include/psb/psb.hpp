// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "psb/attention.hpp"
#include "psb/autoenc.hpp"
#include "psb/bench.hpp"
#include "psb/checkpoint.hpp"
#include "psb/compositing.hpp"
#include "psb/config.hpp"
#include "psb/errors.hpp"
#include "psb/grad_check.hpp"
#include "psb/metrics.hpp"
#include "psb/model.hpp"
#include "psb/ops.hpp"
#include "psb/optim.hpp"
#include "psb/probe.hpp"
#include "psb/psb_encoder.hpp"
#include "psb/recurrent.hpp"
#include "psb/synthdata.hpp"
#include "psb/tape.hpp"
#include "psb/tensor.hpp"
#include "psb/train.hpp"
