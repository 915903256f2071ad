#pragma once

#include "dmerl/adam.hpp"
#include "dmerl/algorithms.hpp"
#include "dmerl/checkpoint.hpp"
#include "dmerl/config.hpp"
#include "dmerl/critic.hpp"
#include "dmerl/diffusion.hpp"
#include "dmerl/env.hpp"
#include "dmerl/errors.hpp"
#include "dmerl/finite_diff.hpp"
#include "dmerl/metrics.hpp"
#include "dmerl/mlp.hpp"
#include "dmerl/objectives.hpp"
#include "dmerl/oracles.hpp"
#include "dmerl/policy.hpp"
#include "dmerl/quadrature.hpp"
#include "dmerl/rng.hpp"
#include "dmerl/rollout.hpp"
#include "dmerl/run.hpp"
#include "dmerl/tensor.hpp"
