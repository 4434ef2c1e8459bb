#pragma once

#include "gradsigns/attacks.hpp"
#include "gradsigns/autodiff.hpp"
#include "gradsigns/checkpoint.hpp"
#include "gradsigns/data.hpp"
#include "gradsigns/error.hpp"
#include "gradsigns/experiment.hpp"
#include "gradsigns/extraction.hpp"
#include "gradsigns/model.hpp"
#include "gradsigns/net.hpp"
#include "gradsigns/protocol.hpp"
#include "gradsigns/random.hpp"
#include "gradsigns/remote.hpp"
#include "gradsigns/server.hpp"
#include "gradsigns/tensor.hpp"
#include "gradsigns/train.hpp"
#include "gradsigns/watermark.hpp"
