#pragma once

#include "fpanet/alignment.hpp"
#include "fpanet/autograd.hpp"
#include "fpanet/checkpoint.hpp"
#include "fpanet/config.hpp"
#include "fpanet/data.hpp"
#include "fpanet/frequency.hpp"
#include "fpanet/fsf.hpp"
#include "fpanet/image_io.hpp"
#include "fpanet/log.hpp"
#include "fpanet/losses.hpp"
#include "fpanet/metrics.hpp"
#include "fpanet/model.hpp"
#include "fpanet/nn.hpp"
#include "fpanet/ops.hpp"
#include "fpanet/optim.hpp"
#include "fpanet/tensor.hpp"
#include "fpanet/trainer.hpp"
