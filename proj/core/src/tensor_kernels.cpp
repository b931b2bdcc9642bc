#include "adbench/tensor.hpp"

#include "adbench/adam.hpp"
#include "adbench/gradcheck.hpp"
#include "adbench/nn.hpp"

namespace adbench {

// Force full instantiation of both precisions here so misuse breaks the
// library build rather than downstream targets.
template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class Adam<float>;
template class Adam<double>;

}  // namespace adbench
