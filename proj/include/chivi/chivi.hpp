#pragma once

// Sandwich variational inference: chi^n-divergence upper bounds (CUBO)
// descended alongside the ELBO, with quadrature and HMC ground truth.

#include "chivi/bounds.hpp"
#include "chivi/common.hpp"
#include "chivi/dataset.hpp"
#include "chivi/gp_models.hpp"
#include "chivi/gradients.hpp"
#include "chivi/hmc.hpp"
#include "chivi/model.hpp"
#include "chivi/optimize.hpp"
#include "chivi/oracle.hpp"
#include "chivi/rng.hpp"
#include "chivi/stats.hpp"
#include "chivi/variational.hpp"
