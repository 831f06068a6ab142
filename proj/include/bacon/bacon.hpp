#pragma once

#include "bacon/commands.hpp"
#include "bacon/config.hpp"
#include "bacon/data.hpp"
#include "bacon/error.hpp"
#include "bacon/estimate.hpp"
#include "bacon/eval.hpp"
#include "bacon/io.hpp"
#include "bacon/losses.hpp"
#include "bacon/nn.hpp"
#include "bacon/random.hpp"
#include "bacon/train.hpp"
#include "bacon/transfer.hpp"
