#pragma once

// Everything: tensors and autodiff, the encoder, pre-training, task heads,
// data generation and evaluation.
#include "timesbert/checkpoint.hpp"
#include "timesbert/config.hpp"
#include "timesbert/data.hpp"
#include "timesbert/embedding.hpp"
#include "timesbert/encoder.hpp"
#include "timesbert/errors.hpp"
#include "timesbert/eval.hpp"
#include "timesbert/gradcheck.hpp"
#include "timesbert/heads.hpp"
#include "timesbert/log.hpp"
#include "timesbert/ops.hpp"
#include "timesbert/optimizer.hpp"
#include "timesbert/params.hpp"
#include "timesbert/presets.hpp"
#include "timesbert/pretrain.hpp"
#include "timesbert/rng.hpp"
#include "timesbert/series.hpp"
#include "timesbert/tensor.hpp"
