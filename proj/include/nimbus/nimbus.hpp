#pragma once

#include "nimbus/core.hpp"
#include "nimbus/imaging.hpp"
#include "nimbus/gaussian_field.hpp"
#include "nimbus/scattering.hpp"
#include "nimbus/particulate.hpp"
#include "nimbus/ggs.hpp"
#include "nimbus/losses.hpp"
#include "nimbus/optim.hpp"
#include "nimbus/trainer.hpp"
#include "nimbus/weathergen.hpp"
#include "nimbus/cli.hpp"
