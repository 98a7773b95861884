#pragma once

// The mshubert command line: synth-data, label, pretrain, relabel, analyze,
// inspect and param-count. Exit codes: 0 ok, 1 usage or other failure,
// 2 validation (config, manifest, labels, file formats), 3 numeric abort.

#include <iosfwd>
#include <string>
#include <vector>

namespace mshubert {

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace mshubert
