#pragma once

#include "lime/tensor.hpp"
#include "lime/autodiff.hpp"
#include "lime/attention.hpp"
#include "lime/model.hpp"
#include "lime/gradcheck.hpp"
#include "lime/pipeline.hpp"
#include "lime/checkpoint.hpp"
#include "lime/data.hpp"
#include "lime/metrics.hpp"
#include "lime/train.hpp"
#include "lime/bench.hpp"
#include "lime/spectral.hpp"
#include "lime/config.hpp"
