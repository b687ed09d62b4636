#pragma once

#include "vfetps/core/alloc.hpp"
#include "vfetps/core/errors.hpp"
#include "vfetps/core/gradcheck.hpp"
#include "vfetps/core/log.hpp"
#include "vfetps/core/ops.hpp"
#include "vfetps/core/rng.hpp"
#include "vfetps/core/tensor.hpp"
#include "vfetps/metrics.hpp"
#include "vfetps/model/alignment.hpp"
#include "vfetps/model/encoders.hpp"
#include "vfetps/model/image.hpp"
#include "vfetps/model/isgvfc.hpp"
#include "vfetps/model/tgmim.hpp"
#include "vfetps/model/tokenizer.hpp"
#include "vfetps/nn/adam.hpp"
#include "vfetps/nn/layers.hpp"
#include "vfetps/synthdata.hpp"
#include "vfetps/train/config.hpp"
#include "vfetps/train/experiments.hpp"
#include "vfetps/train/model.hpp"
#include "vfetps/train/trainer.hpp"
