#pragma once

#include "ttadapt/adapter.hpp"
#include "ttadapt/checkpoint.hpp"
#include "ttadapt/config.hpp"
#include "ttadapt/dmrg.hpp"
#include "ttadapt/error.hpp"
#include "ttadapt/metrics.hpp"
#include "ttadapt/model.hpp"
#include "ttadapt/optim.hpp"
#include "ttadapt/rng.hpp"
#include "ttadapt/svd.hpp"
#include "ttadapt/task.hpp"
#include "ttadapt/tensor.hpp"
#include "ttadapt/tensor_train.hpp"
#include "ttadapt/train.hpp"
