#pragma once

#include "metabin/data.hpp"
#include "metabin/errors.hpp"
#include "metabin/eval.hpp"
#include "metabin/gradcheck.hpp"
#include "metabin/gradsuite.hpp"
#include "metabin/losses.hpp"
#include "metabin/model.hpp"
#include "metabin/norm.hpp"
#include "metabin/runconfig.hpp"
#include "metabin/tensor.hpp"
#include "metabin/trainer.hpp"
