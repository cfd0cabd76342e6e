#pragma once

#include "rdlab/assets.hpp"
#include "rdlab/checkpoint.hpp"
#include "rdlab/dataset.hpp"
#include "rdlab/errors.hpp"
#include "rdlab/evalkit.hpp"
#include "rdlab/evaluate.hpp"
#include "rdlab/imgedit.hpp"
#include "rdlab/model.hpp"
#include "rdlab/nn.hpp"
#include "rdlab/png_io.hpp"
#include "rdlab/prompting.hpp"
#include "rdlab/rng.hpp"
#include "rdlab/training.hpp"
