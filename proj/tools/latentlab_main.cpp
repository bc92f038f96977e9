#include <cstdio>
int main() { std::puts("latentlab: cli under construction"); return 0; }
