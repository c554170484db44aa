#pragma once

#include "sumgp/linalg.hpp"
#include "sumgp/gaussian_core.hpp"
#include "sumgp/constraint_engine.hpp"
#include "sumgp/transform_pipeline.hpp"
#include "sumgp/likelihoods.hpp"
#include "sumgp/approx_inference.hpp"
#include "sumgp/model.hpp"
#include "sumgp/hyper_training.hpp"
#include "sumgp/sim_datasets.hpp"
#include "sumgp/pose_gram.hpp"
#include "sumgp/bench.hpp"
