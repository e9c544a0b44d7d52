#include "core/plan_cache.hpp"

#include <fstream>
#include <sstream>

namespace primkit {

PlanCache::PlanCache(std::filesystem::path disk_dir)
    : disk_dir_(std::move(disk_dir)) {
    if (!disk_dir_.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(disk_dir_, ec);
        if (ec) disk_dir_.clear();  // degrade to memory-only
    }
}

PlanCache::Stats PlanCache::stats() const {
    std::lock_guard lock(mu_);
    return stats_;
}

void PlanCache::reset_stats() {
    std::lock_guard lock(mu_);
    stats_ = Stats{};
}

std::string PlanCache::hash_key(const std::string& problem_key,
                                const std::string& solver_name,
                                const std::string& config_values) {
    // FNV-1a, stable across processes.
    const std::string s = problem_key + "|" + solver_name + "|" + config_values;
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

std::filesystem::path PlanCache::entry_path(const std::string& key) const {
    return disk_dir_ / (key + ".plan");
}

std::shared_ptr<void> PlanCache::get_or_build(const std::string& cache_key,
                                              const std::string& descriptor,
                                              const Build& build,
                                              const Materialize& materialize) {
    std::lock_guard lock(mu_);
    if (auto it = memory_.find(cache_key); it != memory_.end()) {
        stats_.memory_hits += 1;
        return it->second;
    }
    if (!disk_dir_.empty()) {
        std::ifstream in(entry_path(cache_key));
        if (in) {
            std::string header;
            std::getline(in, header);
            std::ostringstream body;
            body << in.rdbuf();
            if (header == "primkit-plan v" + std::to_string(kPlanVersion) &&
                body.str() == descriptor) {
                try {
                    auto plan = materialize(body.str());
                    stats_.disk_hits += 1;
                    memory_[cache_key] = plan;
                    return plan;
                } catch (const std::exception&) {
                    // fall through to rebuild
                }
            }
        }
    }
    auto plan = build();
    stats_.builds += 1;
    memory_[cache_key] = plan;
    if (!disk_dir_.empty()) {
        const auto path = entry_path(cache_key);
        const auto tmp = path.string() + ".tmp";
        std::ofstream out(tmp, std::ios::trunc);
        if (out) {
            out << "primkit-plan v" << kPlanVersion << '\n' << descriptor;
            out.close();
            std::error_code ec;
            std::filesystem::rename(tmp, path, ec);
        }
    }
    return plan;
}

}  // namespace primkit
