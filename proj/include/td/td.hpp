#pragma once

#include "td/adam.hpp"
#include "td/analysis.hpp"
#include "td/checkpoint.hpp"
#include "td/comm.hpp"
#include "td/config.hpp"
#include "td/data.hpp"
#include "td/dataset.hpp"
#include "td/engine.hpp"
#include "td/errors.hpp"
#include "td/experiment.hpp"
#include "td/losses.hpp"
#include "td/metrics.hpp"
#include "td/nets.hpp"
#include "td/ops.hpp"
#include "td/tensor.hpp"
