#include "slap/manifest.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "slap/error.hpp"

namespace slap::io {

using json = nlohmann::ordered_json;

namespace {

[[noreturn]] void fail(std::size_t line, const std::string& what) {
    throw Error::data("manifest line " + std::to_string(line) + ": " + what);
}

} // namespace

Manifest parse_manifest(const std::string& text) {
    Manifest m;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const std::exception& e) {
            fail(lineno, std::string("invalid JSON: ") + e.what());
        }
        if (!j.is_object()) fail(lineno, "expected an object");
        for (const char* key : {"id", "audio_path", "caption", "duration_s"}) {
            if (!j.contains(key)) fail(lineno, std::string("missing field '") + key + "'");
        }
        ManifestRecord r;
        try {
            j.at("id").get_to(r.id);
            j.at("audio_path").get_to(r.audio_path);
            j.at("caption").get_to(r.caption);
            j.at("duration_s").get_to(r.duration_s);
        } catch (const std::exception& e) {
            fail(lineno, std::string("bad field type: ") + e.what());
        }
        if (r.id.empty()) fail(lineno, "empty id");
        if (!seen.insert(r.id).second) fail(lineno, "duplicate id '" + r.id + "'");
        if (r.caption.empty()) fail(lineno, "empty caption");
        if (!(r.duration_s > 0.0 && r.duration_s <= 30.0)) {
            fail(lineno, "duration_s must lie in (0, 30], got " + std::to_string(r.duration_s));
        }
        m.records.push_back(std::move(r));
    }
    return m;
}

Manifest read_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error::io("cannot open manifest: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    Manifest m = parse_manifest(ss.str());
    m.base_dir = std::filesystem::path(path).parent_path().string();
    return m;
}

std::string resolve_audio(const Manifest& m, const ManifestRecord& rec) {
    std::filesystem::path p(rec.audio_path);
    if (m.base_dir.empty() || p.is_absolute()) return rec.audio_path;
    return (std::filesystem::path(m.base_dir) / p).string();
}

void write_manifest(const Manifest& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error::io("cannot write manifest: " + path);
    for (const auto& r : m.records) {
        json j;
        j["id"] = r.id;
        j["audio_path"] = r.audio_path;
        j["caption"] = r.caption;
        j["duration_s"] = r.duration_s;
        out << j.dump() << "\n";
    }
    if (!out) throw Error::io("manifest write failed: " + path);
}

} // namespace slap::io
