#pragma once

#include "delayctl/absde.hpp"
#include "delayctl/bsde.hpp"
#include "delayctl/config.hpp"
#include "delayctl/drivers.hpp"
#include "delayctl/error.hpp"
#include "delayctl/exec.hpp"
#include "delayctl/measures.hpp"
#include "delayctl/models.hpp"
#include "delayctl/report.hpp"
#include "delayctl/sdde.hpp"
#include "delayctl/smp.hpp"
