#include "klab/results.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include "klab/array.hpp"

namespace klab {

ResultsWriter::ResultsWriter(const std::string& path, std::uint64_t seed,
                             std::uint64_t config_hash)
    : seed_(seed), config_hash_(config_hash) {
    if (path == "-") {
        to_stdout_ = true;
    } else {
        auto f = std::make_unique<std::ofstream>(path, std::ios::trunc);
        if (!*f) throw DataError("results: cannot open output file: " + path);
        owned_ = std::move(f);
    }
}

ResultsWriter::~ResultsWriter() = default;

std::ostream& ResultsWriter::stream() { return to_stdout_ ? std::cout : *owned_; }

void ResultsWriter::emit(nlohmann::json record) {
    record["seed"] = seed_;
    std::ostringstream hash;
    hash << std::hex << config_hash_;
    record["config_hash"] = hash.str();
    record["code_version"] = kCodeVersion;
    stream() << record.dump() << '\n';
    stream().flush();
    ++count_;
}

}  // namespace klab
