#pragma once

#include "deeprank/core.hpp"
#include "deeprank/datagen.hpp"
#include "deeprank/eval.hpp"
#include "deeprank/kv.hpp"
#include "deeprank/layers.hpp"
#include "deeprank/net.hpp"
#include "deeprank/rankloss.hpp"
#include "deeprank/sampler.hpp"
#include "deeprank/task.hpp"
#include "deeprank/trainer.hpp"
