#include <cstdio>

int main() {
  std::puts("depth-dissect: CLI under construction");
  return 0;
}
