#include "core/perfdb.hpp"

#include <fstream>
#include <sstream>

#include "core/errors.hpp"

namespace primkit {

void PerfDb::set(const std::string& problem_key, const std::string& solver,
                 const std::string& values) {
    records_[problem_key][solver] = values;
}

std::optional<std::string> PerfDb::get(const std::string& problem_key,
                                       const std::string& solver) const {
    auto rec = records_.find(problem_key);
    if (rec == records_.end()) return std::nullopt;
    auto it = rec->second.find(solver);
    if (it == rec->second.end()) return std::nullopt;
    return it->second;
}

PerfDb PerfDb::parse(const std::string& text) {
    PerfDb db;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos || eq == 0)
            throw_error(ErrorCode::ParseError,
                        "perf-db line " + std::to_string(lineno) +
                            ": missing '=' in '" + line + "'");
        const std::string key = line.substr(0, eq);
        if (db.records_.count(key))
            throw_error(ErrorCode::ParseError,
                        "perf-db line " + std::to_string(lineno) +
                            ": duplicate key '" + key + "'");
        std::map<std::string, std::string> entries;
        std::istringstream rest(line.substr(eq + 1));
        std::string part;
        while (std::getline(rest, part, ';')) {
            const auto colon = part.find(':');
            if (colon == std::string::npos || colon == 0)
                throw_error(ErrorCode::ParseError,
                            "perf-db line " + std::to_string(lineno) +
                                ": bad entry '" + part + "'");
            entries[part.substr(0, colon)] = part.substr(colon + 1);
        }
        if (entries.empty())
            throw_error(ErrorCode::ParseError,
                        "perf-db line " + std::to_string(lineno) +
                            ": no solver entries in '" + line + "'");
        db.records_[key] = std::move(entries);
    }
    return db;
}

PerfDb PerfDb::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw_error(ErrorCode::IoError, "cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string PerfDb::serialize() const {
    std::ostringstream os;
    for (const auto& [key, entries] : records_) {
        os << key << '=';
        bool first = true;
        for (const auto& [solver, values] : entries) {
            if (!first) os << ';';
            first = false;
            os << solver << ':' << values;
        }
        os << '\n';
    }
    return os.str();
}

void PerfDb::save(const std::filesystem::path& path) const {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out)
            throw_error(ErrorCode::IoError, "cannot write " + tmp);
        out << serialize();
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec)
        throw_error(ErrorCode::IoError, "cannot rename " + tmp);
}

}  // namespace primkit
