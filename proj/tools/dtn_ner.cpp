#include <cstdio>

int main() {
  std::puts("dtn-ner: not wired up yet");
  return 1;
}
