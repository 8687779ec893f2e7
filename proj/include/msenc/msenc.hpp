#pragma once

#include "msenc/analysis.hpp"
#include "msenc/cli.hpp"
#include "msenc/dataset.hpp"
#include "msenc/encoder.hpp"
#include "msenc/error.hpp"
#include "msenc/io.hpp"
#include "msenc/metrics.hpp"
#include "msenc/model.hpp"
#include "msenc/optim.hpp"
#include "msenc/parallel.hpp"
#include "msenc/pca.hpp"
#include "msenc/projection.hpp"
#include "msenc/synth.hpp"
#include "msenc/tensor.hpp"
#include "msenc/train.hpp"
