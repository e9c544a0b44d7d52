#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

namespace primkit {

// Text performance database: one line per problem key,
// `<problem-key>=<solver>:<p1>,<p2>[;<solver>:<...>]*`, `#` comments,
// sorted by key on save.
class PerfDb {
public:
    void set(const std::string& problem_key, const std::string& solver,
             const std::string& values);
    std::optional<std::string> get(const std::string& problem_key,
                                   const std::string& solver) const;
    bool empty() const { return records_.empty(); }
    std::size_t size() const { return records_.size(); }

    const std::map<std::string, std::map<std::string, std::string>>& records()
        const {
        return records_;
    }

    static PerfDb load(const std::filesystem::path& path);
    static PerfDb parse(const std::string& text);
    void save(const std::filesystem::path& path) const;
    std::string serialize() const;

    bool operator==(const PerfDb&) const = default;

private:
    // problem key -> (solver name -> serialized values); unknown solver names
    // are preserved verbatim.
    std::map<std::string, std::map<std::string, std::string>> records_;
};

}  // namespace primkit
