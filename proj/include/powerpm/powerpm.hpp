// Umbrella header.
#pragma once

#include "powerpm/autograd.hpp"
#include "powerpm/checkpoint.hpp"
#include "powerpm/corpus.hpp"
#include "powerpm/data.hpp"
#include "powerpm/downstream.hpp"
#include "powerpm/encoder.hpp"
#include "powerpm/errors.hpp"
#include "powerpm/hierarchy.hpp"
#include "powerpm/io.hpp"
#include "powerpm/mask.hpp"
#include "powerpm/optim.hpp"
#include "powerpm/pretrain.hpp"
#include "powerpm/random.hpp"
#include "powerpm/svg.hpp"
#include "powerpm/config.hpp"
#include "powerpm/commands.hpp"
