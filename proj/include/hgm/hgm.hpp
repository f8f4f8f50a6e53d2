#pragma once

#include "hgm/data.hpp"
#include "hgm/errors.hpp"
#include "hgm/gradcheck.hpp"
#include "hgm/hypergcn.hpp"
#include "hgm/hypergraph.hpp"
#include "hgm/metrics.hpp"
#include "hgm/model.hpp"
#include "hgm/ndarray.hpp"
#include "hgm/optim.hpp"
#include "hgm/rng.hpp"
#include "hgm/ssm.hpp"
#include "hgm/tape.hpp"
#include "hgm/train.hpp"
