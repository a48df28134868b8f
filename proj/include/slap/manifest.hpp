#pragma once

#include <string>
#include <vector>

namespace slap::io {

struct ManifestRecord {
    std::string id;
    std::string audio_path;
    std::string caption;
    double duration_s = 0.0;
};

struct Manifest {
    std::vector<ManifestRecord> records;
    std::string base_dir; // directory of the manifest file; "" when parsed from memory

    std::size_t size() const { return records.size(); }
    bool empty() const { return records.empty(); }
};

// Relative audio paths resolve against the manifest's directory.
std::string resolve_audio(const Manifest& m, const ManifestRecord& rec);

// Line-delimited JSON, one record per line with fields
// {id, audio_path, caption, duration_s}. Validation errors carry line numbers.
Manifest read_manifest(const std::string& path);
Manifest parse_manifest(const std::string& text); // exposed for tests
void write_manifest(const Manifest& m, const std::string& path);

} // namespace slap::io
