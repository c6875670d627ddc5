#pragma once

#include "mcvi/error.hpp"
#include "mcvi/linalg.hpp"
#include "mcvi/model.hpp"
#include "mcvi/elbo.hpp"
#include "mcvi/optim.hpp"
#include "mcvi/synthetic.hpp"
#include "mcvi/evaluate.hpp"
#include "mcvi/dataset.hpp"
#include "mcvi/serialize.hpp"
#include "mcvi/config.hpp"
