#pragma once

#include "config.hpp"
#include "image_io.hpp"
#include "instance.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "prm.hpp"
#include "synth.hpp"
#include "tensor.hpp"
#include "train.hpp"
