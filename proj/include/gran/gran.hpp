#pragma once

#include "gran/common.hpp"
#include "gran/tensor.hpp"
#include "gran/optim.hpp"
#include "gran/checkpoint.hpp"
#include "gran/dataset.hpp"
#include "gran/graph.hpp"
#include "gran/model.hpp"
#include "gran/training.hpp"
#include "gran/evaluation.hpp"
