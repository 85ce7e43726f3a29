#pragma once

// Everything, for tools and quick experiments.

#include "embedmask/ablation.hpp"
#include "embedmask/config.hpp"
#include "embedmask/coupling.hpp"
#include "embedmask/dataset_io.hpp"
#include "embedmask/eval.hpp"
#include "embedmask/geometry.hpp"
#include "embedmask/gradcheck.hpp"
#include "embedmask/gradcheck_suite.hpp"
#include "embedmask/infer.hpp"
#include "embedmask/losses.hpp"
#include "embedmask/model.hpp"
#include "embedmask/ops.hpp"
#include "embedmask/predictions_io.hpp"
#include "embedmask/resize.hpp"
#include "embedmask/rng.hpp"
#include "embedmask/sampling.hpp"
#include "embedmask/scenes.hpp"
#include "embedmask/tensor.hpp"
#include "embedmask/tensor_io.hpp"
#include "embedmask/train.hpp"
