#pragma once

#include "rflow/adam.hpp"
#include "rflow/autodiff.hpp"
#include "rflow/binio.hpp"
#include "rflow/checkpoint.hpp"
#include "rflow/config.hpp"
#include "rflow/conversion.hpp"
#include "rflow/diagnostics.hpp"
#include "rflow/error.hpp"
#include "rflow/field.hpp"
#include "rflow/gmm.hpp"
#include "rflow/losses.hpp"
#include "rflow/mlp.hpp"
#include "rflow/pipeline.hpp"
#include "rflow/rng.hpp"
#include "rflow/samplers.hpp"
#include "rflow/tensor.hpp"
