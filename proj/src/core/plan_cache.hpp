#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>

namespace primkit {

// Two-level plan cache: in-memory map in front of a directory of serialized
// plan descriptors. Memory lookups never touch disk; disk hits populate
// memory. Disk failures degrade to rebuild.
class PlanCache {
public:
    struct Stats {
        std::uint64_t builds = 0;
        std::uint64_t memory_hits = 0;
        std::uint64_t disk_hits = 0;
    };

    static constexpr int kPlanVersion = 1;

    explicit PlanCache(std::filesystem::path disk_dir);

    const std::filesystem::path& disk_dir() const { return disk_dir_; }
    Stats stats() const;
    void reset_stats();

    using Build = std::function<std::shared_ptr<void>()>;
    using Materialize =
        std::function<std::shared_ptr<void>(const std::string& descriptor)>;

    // First call builds (counted) and persists; later in-process calls hit
    // memory; a fresh cache over the same directory materializes from disk
    // without a build. Corrupted entries rebuild silently.
    std::shared_ptr<void> get_or_build(const std::string& cache_key,
                                       const std::string& descriptor,
                                       const Build& build,
                                       const Materialize& materialize);

    static std::string hash_key(const std::string& problem_key,
                                const std::string& solver_name,
                                const std::string& config_values);

private:
    std::filesystem::path entry_path(const std::string& cache_key) const;

    std::filesystem::path disk_dir_;
    mutable std::mutex mu_;
    std::map<std::string, std::shared_ptr<void>> memory_;
    Stats stats_;
};

}  // namespace primkit
