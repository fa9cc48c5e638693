#pragma once

// On-disk formats.
//
// PGRD grid file, all little-endian:
//   offset 0  char[4] "PGRD"
//   offset 4  u16     version (1)
//   offset 6  u8      dtype (0 = f32, 1 = i32)
//   offset 7  u8      reserved (0)
//   offset 8  u32     width
//   offset 12 u32     height
//   offset 16 payload, row-major, width*height elements
//
// Census CSV: header `region_id,parent_id,count`, one row per region,
// parent_id -1 for top-level rows.
//
// Dataset manifest: JSON, paths relative to the manifest's directory.

#include "popmap/error.hpp"
#include "popmap/grid.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

namespace popmap {

namespace fs = std::filesystem;

// ============================================================================
// Little-endian helpers
// ============================================================================

namespace le {

template <class T>
T byteswap_if_needed(T v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    }
}

template <class T>
void put(std::string& out, T v) {
    v = byteswap_if_needed(v);
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <class T>
T get(const unsigned char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return byteswap_if_needed(v);
}

} // namespace le

inline std::string read_file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::missing_file, "cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

// Writes to a sibling temp file and renames it into place.
inline void write_file_atomic(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorCode::missing_file, "cannot write '" + tmp.string() + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error(ErrorCode::missing_file, "short write to '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

// FNV-1a 64-bit.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string file_hash(const fs::path& path) { return hex64(fnv1a(read_file_bytes(path))); }

// ============================================================================
// PGRD grids
// ============================================================================

enum class DType : std::uint8_t { f32 = 0, i32 = 1 };

inline constexpr std::array<char, 4> kGridMagic{'P', 'G', 'R', 'D'};
inline constexpr std::uint16_t kGridVersion = 1;
inline constexpr std::size_t kGridHeaderSize = 16;

struct GridHeader {
    DType dtype = DType::f32;
    std::uint32_t width = 0;
    std::uint32_t height = 0;
};

template <class T>
constexpr DType dtype_of() {
    if constexpr (std::is_same_v<T, std::int32_t>) return DType::i32;
    else return DType::f32;
}

inline std::string encode_grid_header(const GridHeader& h) {
    std::string out(kGridMagic.data(), kGridMagic.size());
    le::put<std::uint16_t>(out, kGridVersion);
    le::put<std::uint8_t>(out, static_cast<std::uint8_t>(h.dtype));
    le::put<std::uint8_t>(out, 0);
    le::put<std::uint32_t>(out, h.width);
    le::put<std::uint32_t>(out, h.height);
    return out;
}

inline GridHeader decode_grid_header(const unsigned char* p, std::size_t available, const std::string& source) {
    if (available < kGridHeaderSize) {
        throw Error(ErrorCode::format, source + ": truncated header at byte offset " + std::to_string(available) +
                                           " (need " + std::to_string(kGridHeaderSize) + ")");
    }
    if (std::memcmp(p, kGridMagic.data(), 4) != 0) throw Error(ErrorCode::format, source + ": bad magic, not a PGRD file");
    auto version = le::get<std::uint16_t>(p + 4);
    if (version != kGridVersion)
        throw Error(ErrorCode::format, source + ": unsupported PGRD version " + std::to_string(version));
    auto dtype = p[6];
    if (dtype > 1) throw Error(ErrorCode::format, source + ": unknown dtype code " + std::to_string(dtype));
    return {static_cast<DType>(dtype), le::get<std::uint32_t>(p + 8), le::get<std::uint32_t>(p + 12)};
}

// Element type stored on disk for an in-memory grid type: int32 stays i32,
// everything else is written as f32.
template <class T>
using disk_type_t = std::conditional_t<std::is_same_v<T, std::int32_t>, std::int32_t, float>;

template <class T>
std::string encode_grid(const Grid<T>& grid) {
    using D = disk_type_t<T>;
    std::string out = encode_grid_header({dtype_of<D>(), static_cast<std::uint32_t>(grid.width),
                                          static_cast<std::uint32_t>(grid.height)});
    out.reserve(kGridHeaderSize + grid.size() * 4);
    for (const T& v : grid.values) le::put<D>(out, static_cast<D>(v));
    return out;
}

template <class T>
void save_grid(const Grid<T>& grid, const fs::path& path) {
    write_file_atomic(path, encode_grid(grid));
}

template <class T>
Grid<T> decode_grid(std::string_view bytes, const std::string& source) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    GridHeader h = decode_grid_header(p, bytes.size(), source);
    const std::size_t n = static_cast<std::size_t>(h.width) * h.height;
    const std::size_t need = kGridHeaderSize + n * 4;
    if (bytes.size() < need) {
        throw Error(ErrorCode::format, source + ": truncated payload at byte offset " + std::to_string(bytes.size()) +
                                           " (expected " + std::to_string(need) + ")");
    }
    Grid<T> g(h.width, h.height);
    const unsigned char* q = p + kGridHeaderSize;
    if (h.dtype == DType::f32) {
        for (std::size_t i = 0; i < n; ++i) g.values[i] = static_cast<T>(le::get<float>(q + 4 * i));
    } else {
        for (std::size_t i = 0; i < n; ++i) g.values[i] = static_cast<T>(le::get<std::int32_t>(q + 4 * i));
    }
    return g;
}

template <class T>
Grid<T> load_grid(const fs::path& path) {
    return decode_grid<T>(read_file_bytes(path), path.string());
}

inline GridHeader read_grid_header(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::missing_file, "cannot open '" + path.string() + "'");
    unsigned char buf[kGridHeaderSize];
    in.read(reinterpret_cast<char*>(buf), kGridHeaderSize);
    return decode_grid_header(buf, static_cast<std::size_t>(in.gcount()), path.string());
}

// Sequential row access to a PGRD file without loading the payload.
class GridRowReader {
public:
    explicit GridRowReader(const fs::path& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw Error(ErrorCode::missing_file, "cannot open '" + path.string() + "'");
        unsigned char buf[kGridHeaderSize];
        in_.read(reinterpret_cast<char*>(buf), kGridHeaderSize);
        header_ = decode_grid_header(buf, static_cast<std::size_t>(in_.gcount()), path.string());
        raw_.resize(static_cast<std::size_t>(header_.width) * 4);
    }

    const GridHeader& header() const { return header_; }
    std::size_t width() const { return header_.width; }
    std::size_t height() const { return header_.height; }

    // Reads row `row` (any order) converted to T.
    template <class T>
    void read_row(std::size_t row, std::vector<T>& out) {
        const std::size_t offset = kGridHeaderSize + row * raw_.size();
        in_.seekg(static_cast<std::streamoff>(offset));
        in_.read(raw_.data(), static_cast<std::streamsize>(raw_.size()));
        if (static_cast<std::size_t>(in_.gcount()) != raw_.size()) {
            throw Error(ErrorCode::format, path_.string() + ": truncated payload at byte offset " +
                                               std::to_string(offset + static_cast<std::size_t>(in_.gcount())));
        }
        out.resize(header_.width);
        const auto* q = reinterpret_cast<const unsigned char*>(raw_.data());
        for (std::size_t i = 0; i < header_.width; ++i) {
            out[i] = header_.dtype == DType::f32 ? static_cast<T>(le::get<float>(q + 4 * i))
                                                 : static_cast<T>(le::get<std::int32_t>(q + 4 * i));
        }
    }

private:
    fs::path path_;
    std::ifstream in_;
    GridHeader header_;
    std::vector<char> raw_;
};

// Appends rows to a new f32 PGRD file; renamed into place by finish().
class GridRowWriter {
public:
    GridRowWriter(const fs::path& path, std::size_t width, std::size_t height)
        : path_(path), tmp_(path.string() + ".tmp"), width_(width), height_(height) {
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        out_.open(tmp_, std::ios::binary | std::ios::trunc);
        if (!out_) throw Error(ErrorCode::missing_file, "cannot write '" + tmp_.string() + "'");
        auto h = encode_grid_header({DType::f32, static_cast<std::uint32_t>(width), static_cast<std::uint32_t>(height)});
        out_.write(h.data(), static_cast<std::streamsize>(h.size()));
    }

    template <class T>
    void write_row(const std::vector<T>& row) {
        buf_.clear();
        for (std::size_t i = 0; i < width_; ++i) le::put<float>(buf_, static_cast<float>(row[i]));
        out_.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        ++rows_;
    }

    void finish() {
        if (rows_ != height_)
            throw Error(ErrorCode::invalid_argument, "GridRowWriter: wrote " + std::to_string(rows_) + " of " +
                                                         std::to_string(height_) + " rows");
        out_.close();
        if (!out_) throw Error(ErrorCode::missing_file, "short write to '" + tmp_.string() + "'");
        fs::rename(tmp_, path_);
    }

private:
    fs::path path_, tmp_;
    std::size_t width_, height_, rows_ = 0;
    std::ofstream out_;
    std::string buf_;
};

// ============================================================================
// Census CSV
// ============================================================================

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace detail {

template <class T>
bool parse_field(std::string_view s, T& out) {
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
    if (s.empty()) return false;
    auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    return res.ec == std::errc{} && res.ptr == s.data() + s.size();
}

} // namespace detail

inline CensusTable parse_census_csv(std::string_view text, const std::string& source) {
    CensusTable table;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    bool header_seen = false;
    while (pos <= text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (!header_seen) {
            if (line != "region_id,parent_id,count")
                throw Error(ErrorCode::format, source + ":1: expected header 'region_id,parent_id,count'");
            header_seen = true;
            continue;
        }
        if (line.empty()) continue;

        std::string_view f[3];
        std::size_t start = 0;
        int nf = 0;
        for (std::size_t i = 0; i <= line.size(); ++i) {
            if (i == line.size() || line[i] == ',') {
                if (nf == 3) { nf = 4; break; }
                f[nf++] = line.substr(start, i - start);
                start = i + 1;
            }
        }
        std::int64_t id = 0, parent = 0;
        double count = 0.0;
        const std::string where = source + ":" + std::to_string(line_no) + ": ";
        if (nf != 3 || !detail::parse_field(f[0], id) || !detail::parse_field(f[1], parent) ||
            !detail::parse_field(f[2], count)) {
            throw Error(ErrorCode::format, where + "malformed row '" + std::string(line) + "'");
        }
        try {
            table.add(id, parent, count);
        } catch (const Error& e) {
            throw Error(e.code(), where + e.what());
        }
        if (pos > text.size()) break;
    }
    if (!header_seen) throw Error(ErrorCode::format, source + ": empty census file");
    return table;
}

inline CensusTable load_census_csv(const fs::path& path) {
    return parse_census_csv(read_file_bytes(path), path.string());
}

inline std::string encode_census_csv(const CensusTable& table) {
    std::string out = "region_id,parent_id,count\n";
    for (const auto& [id, e] : table.rows()) {
        out += std::to_string(id) + "," + std::to_string(e.parent_id) + "," + format_double(e.count) + "\n";
    }
    return out;
}

inline void save_census_csv(const CensusTable& table, const fs::path& path) {
    write_file_atomic(path, encode_census_csv(table));
}

// ============================================================================
// Dataset + manifest
// ============================================================================

enum class Level { fine, coarse };

inline std::string_view level_name(Level l) { return l == Level::fine ? "fine" : "coarse"; }

inline Level parse_level(std::string_view s) {
    if (s == "fine") return Level::fine;
    if (s == "coarse") return Level::coarse;
    throw Error(ErrorCode::usage, "unknown census level '" + std::string(s) + "'");
}

enum class Normalization { zscore, none };

struct Dataset {
    std::string name;
    CovariateStack covariates;
    std::vector<Normalization> normalization; // parallel to covariate layers
    BuildingGrid buildings;
    RegionMap fine_regions;
    CensusTable fine_census;
    std::optional<RegionMap> coarse_regions;
    std::optional<CensusTable> coarse_census;

    std::size_t width() const { return buildings.width; }
    std::size_t height() const { return buildings.height; }
    bool has_coarse() const { return coarse_regions.has_value() && coarse_census.has_value(); }

    const RegionMap& regions(Level l) const {
        if (l == Level::fine) return fine_regions;
        if (!coarse_regions) throw Error(ErrorCode::missing_region, "dataset '" + name + "' has no coarse level");
        return *coarse_regions;
    }
    const CensusTable& census(Level l) const {
        if (l == Level::fine) return fine_census;
        if (!coarse_census) throw Error(ErrorCode::missing_region, "dataset '" + name + "' has no coarse level");
        return *coarse_census;
    }
};

// Checks every cross-file invariant of a dataset.
inline void validate_dataset(const Dataset& d) {
    const std::size_t w = d.width(), h = d.height();
    if (d.covariates.width() != w || d.covariates.height() != h)
        throw Error(ErrorCode::dimension_mismatch, "covariate stack " + shape_string(d.covariates.width(), d.covariates.height()) +
                                                       " vs buildings " + shape_string(w, h));
    if (d.normalization.size() != d.covariates.layer_count())
        throw Error(ErrorCode::invalid_argument, "normalization roles do not match covariate count");
    for (float b : d.buildings.values) {
        if (!(b >= 0.0f) || !std::isfinite(b))
            throw Error(ErrorCode::format, "building grid must be finite and non-negative");
    }
    auto check_regions = [&](const RegionMap& r, const CensusTable& c, std::string_view lvl) {
        require_same_shape(r, d.buildings, std::string(lvl) + " regions vs buildings");
        for (auto id : r.values) {
            if (id != kOutside && !c.contains(id))
                throw Error(ErrorCode::missing_region, std::string(lvl) + " region " + std::to_string(id) +
                                                           " appears in raster but not in census");
        }
    };
    check_regions(d.fine_regions, d.fine_census, "fine");
    if (d.coarse_regions.has_value() != d.coarse_census.has_value())
        throw Error(ErrorCode::invalid_argument, "coarse regions and coarse census must be given together");
    if (d.has_coarse()) {
        check_regions(*d.coarse_regions, *d.coarse_census, "coarse");
        check_hierarchy(d.fine_census, *d.coarse_census, 0.5);
        for (std::size_t i = 0; i < d.fine_regions.size(); ++i) {
            auto f = d.fine_regions.values[i];
            auto c = d.coarse_regions->values[i];
            std::int64_t expect = f == kOutside ? kOutside : d.fine_census.at(f).parent_id;
            if (expect != c) {
                throw Error(ErrorCode::census_inconsistency,
                            "cell " + std::to_string(i) + ": fine region " + std::to_string(f) + " has parent " +
                                std::to_string(expect) + " but coarse raster says " + std::to_string(c));
            }
        }
    }
}

struct ManifestEntry {
    std::string name;
    std::string path;
    Normalization normalization = Normalization::zscore;
};

struct DatasetManifest {
    std::string dataset_name;
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<ManifestEntry> covariates;
    std::vector<std::string> use_layers; // empty = all, in manifest order
    std::string buildings;
    std::string fine_regions, coarse_regions;
    std::string fine_census, coarse_census;
};

inline DatasetManifest parse_manifest(std::string_view text, const std::string& source) {
    using nlohmann::json;
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::format, source + ": invalid JSON: " + e.what());
    }
    DatasetManifest m;
    try {
        m.dataset_name = j.at("name").get<std::string>();
        m.width = j.at("width").get<std::size_t>();
        m.height = j.at("height").get<std::size_t>();
        for (const auto& c : j.at("covariates")) {
            ManifestEntry e;
            e.name = c.at("name").get<std::string>();
            e.path = c.at("path").get<std::string>();
            std::string role = c.value("normalization", std::string("zscore"));
            if (role == "zscore") e.normalization = Normalization::zscore;
            else if (role == "none") e.normalization = Normalization::none;
            else throw Error(ErrorCode::format, source + ": unknown normalization '" + role + "' for layer '" + e.name + "'");
            m.covariates.push_back(std::move(e));
        }
        if (j.contains("use_layers")) m.use_layers = j.at("use_layers").get<std::vector<std::string>>();
        m.buildings = j.at("buildings").get<std::string>();
        m.fine_regions = j.at("regions").at("fine").get<std::string>();
        m.fine_census = j.at("census").at("fine").get<std::string>();
        if (j.at("regions").contains("coarse")) m.coarse_regions = j.at("regions").at("coarse").get<std::string>();
        if (j.at("census").contains("coarse")) m.coarse_census = j.at("census").at("coarse").get<std::string>();
    } catch (const json::exception& e) {
        throw Error(ErrorCode::format, source + ": malformed manifest: " + e.what());
    }
    return m;
}

inline std::string encode_manifest(const DatasetManifest& m) {
    using nlohmann::ordered_json;
    ordered_json j;
    j["name"] = m.dataset_name;
    j["width"] = m.width;
    j["height"] = m.height;
    j["covariates"] = ordered_json::array();
    for (const auto& c : m.covariates) {
        j["covariates"].push_back({{"name", c.name},
                                   {"path", c.path},
                                   {"normalization", c.normalization == Normalization::zscore ? "zscore" : "none"}});
    }
    if (!m.use_layers.empty()) j["use_layers"] = m.use_layers;
    j["buildings"] = m.buildings;
    j["regions"]["fine"] = m.fine_regions;
    if (!m.coarse_regions.empty()) j["regions"]["coarse"] = m.coarse_regions;
    j["census"]["fine"] = m.fine_census;
    if (!m.coarse_census.empty()) j["census"]["coarse"] = m.coarse_census;
    return j.dump(2) + "\n";
}

inline DatasetManifest load_manifest(const fs::path& path) {
    return parse_manifest(read_file_bytes(path), path.string());
}

inline std::vector<fs::path> manifest_inputs(const DatasetManifest& m, const fs::path& manifest_path) {
    const fs::path base = manifest_path.parent_path();
    std::vector<fs::path> out;
    for (const auto& c : m.covariates) out.push_back(base / c.path);
    out.push_back(base / m.buildings);
    out.push_back(base / m.fine_regions);
    out.push_back(base / m.fine_census);
    if (!m.coarse_regions.empty()) out.push_back(base / m.coarse_regions);
    if (!m.coarse_census.empty()) out.push_back(base / m.coarse_census);
    return out;
}

// Loads and fully validates a dataset. Covariate order follows the manifest
// (or `use_layers` when present).
inline Dataset load_dataset(const fs::path& manifest_path) {
    const DatasetManifest m = load_manifest(manifest_path);
    const fs::path base = manifest_path.parent_path();
    auto require_file = [&](const std::string& rel, std::string_view role) {
        fs::path p = base / rel;
        if (!fs::exists(p)) throw Error(ErrorCode::missing_file, std::string(role) + " file '" + p.string() + "' does not exist");
        return p;
    };
    auto require_dims = [&](std::size_t w, std::size_t h, std::string_view what) {
        if (w != m.width || h != m.height) {
            throw Error(ErrorCode::dimension_mismatch, std::string(what) + " is " + shape_string(w, h) +
                                                           ", manifest declares " + shape_string(m.width, m.height));
        }
    };

    std::vector<const ManifestEntry*> selected;
    if (m.use_layers.empty()) {
        for (const auto& c : m.covariates) selected.push_back(&c);
    } else {
        for (const auto& name : m.use_layers) {
            auto it = std::find_if(m.covariates.begin(), m.covariates.end(), [&](const auto& c) { return c.name == name; });
            if (it == m.covariates.end()) throw Error(ErrorCode::unknown_layer, "use_layers references unknown layer '" + name + "'");
            selected.push_back(&*it);
        }
    }

    Dataset d;
    d.name = m.dataset_name;
    d.covariates = CovariateStack(m.width, m.height);
    for (const auto* c : selected) {
        auto g = load_grid<float>(require_file(c->path, "covariate '" + c->name + "'"));
        require_dims(g.width, g.height, "layer '" + c->name + "'");
        d.covariates.add_layer(c->name, std::move(g.values));
        d.normalization.push_back(c->normalization);
    }
    d.buildings = load_grid<float>(require_file(m.buildings, "buildings"));
    require_dims(d.buildings.width, d.buildings.height, "buildings");
    d.fine_regions = load_grid<std::int32_t>(require_file(m.fine_regions, "fine regions"));
    require_dims(d.fine_regions.width, d.fine_regions.height, "fine regions");
    d.fine_census = load_census_csv(require_file(m.fine_census, "fine census"));
    if (!m.coarse_regions.empty()) {
        d.coarse_regions = load_grid<std::int32_t>(require_file(m.coarse_regions, "coarse regions"));
        require_dims(d.coarse_regions->width, d.coarse_regions->height, "coarse regions");
    }
    if (!m.coarse_census.empty()) d.coarse_census = load_census_csv(require_file(m.coarse_census, "coarse census"));
    validate_dataset(d);
    return d;
}

// Writes manifest.json plus one file per grid/table into `dir`.
inline fs::path save_dataset(const Dataset& d, const fs::path& dir) {
    fs::create_directories(dir);
    DatasetManifest m;
    m.dataset_name = d.name;
    m.width = d.width();
    m.height = d.height();
    for (std::size_t i = 0; i < d.covariates.layer_count(); ++i) {
        const auto& layer = d.covariates.layer(i);
        std::string file = "cov_" + layer.name + ".pgrd";
        Grid<float> g(d.width(), d.height());
        g.values = layer.values;
        save_grid(g, dir / file);
        m.covariates.push_back({layer.name, file, d.normalization.empty() ? Normalization::zscore : d.normalization[i]});
    }
    m.buildings = "buildings.pgrd";
    save_grid(d.buildings, dir / m.buildings);
    m.fine_regions = "regions_fine.pgrd";
    save_grid(d.fine_regions, dir / m.fine_regions);
    m.fine_census = "census_fine.csv";
    save_census_csv(d.fine_census, dir / m.fine_census);
    if (d.has_coarse()) {
        m.coarse_regions = "regions_coarse.pgrd";
        save_grid(*d.coarse_regions, dir / m.coarse_regions);
        m.coarse_census = "census_coarse.csv";
        save_census_csv(*d.coarse_census, dir / m.coarse_census);
    }
    const fs::path manifest = dir / "manifest.json";
    write_file_atomic(manifest, encode_manifest(m));
    return manifest;
}

} // namespace popmap
