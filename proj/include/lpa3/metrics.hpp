#pragma once

// JSON-lines metric stream plus a one-row summary CSV of the last record.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

namespace lpa3 {

using Json = nlohmann::ordered_json;

class MetricsWriter {
public:
    // Truncates the file. Throws std::runtime_error naming the path.
    explicit MetricsWriter(const std::filesystem::path& path);

    // One object per line, flushed immediately.
    void append(const Json& record);
    const std::vector<Json>& records() const { return records_; }

private:
    std::filesystem::path path_;
    std::ofstream os_;
    std::vector<Json> records_;
};

std::vector<Json> read_jsonl(const std::filesystem::path& path);

// Header row plus the last record's values for `columns` (header only when
// there are no records). Numbers use the JSON text form so a reparsed stream
// reproduces the same bytes; missing fields are left empty.
std::string summary_csv(const std::vector<Json>& records, const std::vector<std::string>& columns);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace lpa3
