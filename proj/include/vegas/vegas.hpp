#pragma once

#include "vegas/attention.hpp"
#include "vegas/benchmark.hpp"
#include "vegas/common.hpp"
#include "vegas/decoder.hpp"
#include "vegas/fixtures.hpp"
#include "vegas/injection.hpp"
#include "vegas/metrics.hpp"
#include "vegas/model_config.hpp"
#include "vegas/random.hpp"
#include "vegas/session.hpp"
#include "vegas/steering.hpp"
#include "vegas/weights.hpp"
