#include "pillar/app.hpp"

int main(int argc, char **argv) { return pillar::app::run(argc, argv); }
