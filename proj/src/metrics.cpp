#include "lpa3/metrics.hpp"

#include <sstream>
#include <stdexcept>

namespace lpa3 {

MetricsWriter::MetricsWriter(const std::filesystem::path& path) : path_(path), os_(path, std::ios::trunc) {
    if (!os_) throw std::runtime_error("cannot open metrics file " + path.string());
}

void MetricsWriter::append(const Json& record) {
    os_ << record.dump() << '\n';
    os_.flush();
    if (!os_) throw std::runtime_error("write failed for " + path_.string());
    records_.push_back(record);
}

std::vector<Json> read_jsonl(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::vector<Json> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(Json::parse(line));
        } catch (const Json::parse_error& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::string summary_csv(const std::vector<Json>& records, const std::vector<std::string>& columns) {
    std::ostringstream os;
    for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
    os << '\n';
    if (records.empty()) return os.str();
    const Json& last = records.back();
    for (std::size_t i = 0; i < columns.size(); ++i) {
        if (i) os << ',';
        auto it = last.find(columns[i]);
        if (it == last.end() || it->is_null()) continue;
        os << (it->is_string() ? it->get<std::string>() : it->dump());
    }
    os << '\n';
    return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string());
    os << text;
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace lpa3
