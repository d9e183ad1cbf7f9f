#pragma once

#include <string>

#include "vitae/metrics.hpp"

namespace vitae {

enum class ReportFormat { json, csv };

// Serialize an evaluation report to disk. Identical reports produce
// byte-identical files. Throws std::runtime_error on an unwritable path.
void write_report(const EvalReport& r, const std::string& path, ReportFormat format);

// The whole command-line surface: gen-data, train-ae, train-flow,
// reconstruct, sample, eval, bench, ablate-loss, ablate-reg. Returns the
// process exit code: 0 success, 1 usage or configuration error, 2 runtime
// failure. The VTK_SEED environment variable overrides the config seeds;
// explicit --set overrides beat it.
int run_cli(int argc, const char* const* argv);

}  // namespace vitae
