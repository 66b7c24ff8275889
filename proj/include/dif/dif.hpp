#pragma once

// Everything in one include.

#include "dif/cli.hpp"
