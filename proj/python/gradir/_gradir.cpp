#include <pybind11/pybind11.h>
PYBIND11_MODULE(_gradir, m) { m.doc() = "scalar autodiff core"; }
