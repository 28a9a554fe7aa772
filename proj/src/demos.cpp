#include "gradir/ir.hpp"
