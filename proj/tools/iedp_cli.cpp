#include <cstdio>
int main() { std::puts("iedp cli placeholder"); return 0; }
