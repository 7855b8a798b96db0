#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>

#include <json.hpp>

namespace klab {

inline constexpr const char* kCodeVersion = "0.1.0";

// Line-delimited JSON records. Every record carries the run seed, config
// hash and code version so an output file is replayable on its own.
// Path "-" streams to standard output.
class ResultsWriter {
public:
    ResultsWriter(const std::string& path, std::uint64_t seed, std::uint64_t config_hash);
    ~ResultsWriter();

    void emit(nlohmann::json record);
    std::size_t records_written() const { return count_; }

private:
    std::ostream& stream();

    std::unique_ptr<std::ostream> owned_;
    bool to_stdout_ = false;
    std::uint64_t seed_;
    std::uint64_t config_hash_;
    std::size_t count_ = 0;
};

}  // namespace klab
