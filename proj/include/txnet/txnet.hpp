#pragma once

#include "txnet/analysis.hpp"
#include "txnet/check_suite.hpp"
#include "txnet/config.hpp"
#include "txnet/error.hpp"
#include "txnet/mixer.hpp"
#include "txnet/network.hpp"
#include "txnet/nn_ops.hpp"
#include "txnet/param_store.hpp"
#include "txnet/tensor.hpp"
#include "txnet/weight_file.hpp"
