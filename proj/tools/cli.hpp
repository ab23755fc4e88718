#pragma once

#include "msae/io.hpp"

#include <map>
#include <string>
#include <vector>

namespace msae::cli {

enum ExitCode : int {
  kSuccess = 0,
  kMismatch = 1,
  kValidation = 2,
  kNonConvergence = 3,
  kIo = 4,
};

/// Every flag that can influence outputs, as strings, plus the worker count.
struct Options {
  std::string units;
  std::string aux;
  std::string out = ".";
  std::uint64_t seed = 1;
  std::string estimator = "myr";
  int bootstrap = 200;
  int replicates = 1000;
  int truth_replicates = 1000;
  int max_iterations = 200;
  std::string experiment = "a";
  bool fpc = false;
  bool calibrated = false;
  bool plug_in = false;
  unsigned threads = 1;
};

/// Flags recorded in the manifest (threads excluded: outputs never depend on it).
[[nodiscard]] std::map<std::string, std::string> to_flags(const Options& options);
[[nodiscard]] Options from_flags(const std::map<std::string, std::string>& flags);

/// Runs one subcommand, writes its outputs and manifest.json into options.out.
/// Returns the manifest that was written.
RunManifest run_command(const std::string& command, const Options& options);

/// Re-runs a manifest into `out` with `threads` workers; true when every output matches.
bool replay(const fs::path& manifest_path, const fs::path& out, unsigned threads, std::string& report);

/// Full command-line entry point; returns the process exit code.
int main(int argc, char** argv);

}  // namespace msae::cli
