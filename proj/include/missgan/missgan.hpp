#pragma once

// Everything in one include.

#include "missgan/checkpoint.hpp"
#include "missgan/config.hpp"
#include "missgan/detector.hpp"
#include "missgan/error.hpp"
#include "missgan/gru.hpp"
#include "missgan/hmm.hpp"
#include "missgan/keyvalue.hpp"
#include "missgan/numerics.hpp"
#include "missgan/recnet.hpp"
#include "missgan/rng.hpp"
#include "missgan/segmentation.hpp"
#include "missgan/synth.hpp"
#include "missgan/timeseries.hpp"
#include "missgan/trainer.hpp"
