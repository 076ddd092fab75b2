#include "faun/tensor.hpp"

int main() { return 0; }
