#include <iostream>
#include <string>
#include <vector>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "cli/commands.hpp"

int main(int argc, char** argv) {
  // Logs go to stderr so stdout carries only command results.
  spdlog::set_default_logger(spdlog::stderr_color_mt("caft"));
  return caft::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
