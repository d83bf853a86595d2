#include <cstdio>
int main() { std::puts("placekit"); return 0; }
