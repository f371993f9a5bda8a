#pragma once

#include "uga/alignment.hpp"
#include "uga/autodiff.hpp"
#include "uga/checkpoint.hpp"
#include "uga/data.hpp"
#include "uga/eval.hpp"
#include "uga/evidential.hpp"
#include "uga/format.hpp"
#include "uga/gradcheck.hpp"
#include "uga/models.hpp"
#include "uga/special.hpp"
#include "uga/tensor.hpp"
#include "uga/train.hpp"
