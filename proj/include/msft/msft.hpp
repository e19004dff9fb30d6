// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "msft/numerics/errors.hpp"
#include "msft/numerics/rng.hpp"
#include "msft/numerics/tensor.hpp"
#include "msft/numerics/ops.hpp"
#include "msft/numerics/gradcheck.hpp"
#include "msft/multiscale.hpp"
#include "msft/backbone.hpp"
#include "msft/multiscale_finetune.hpp"
#include "msft/model.hpp"
#include "msft/data.hpp"
#include "msft/training/optim.hpp"
#include "msft/training/metrics.hpp"
#include "msft/training/trainer.hpp"
#include "msft/training/ablation.hpp"
#include "msft/diagnostics.hpp"
#include "msft/io/checkpoint.hpp"
#include "msft/io/run_config.hpp"
