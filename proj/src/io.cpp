#include "m3dnca/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <json.hpp>

#include "m3dnca/error.hpp"

namespace m3dnca::io {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

constexpr char kMagic[6] = {'M', '3', 'D', 'N', 'C', 'A'};
constexpr std::size_t kPreamble = 16;  // magic + version + reserved + u64 length

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
std::uint64_t get_le(const unsigned char* p, int bytes) {
    std::uint64_t v = 0;
    for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}
std::uint64_t get_be(const unsigned char* p, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v = (v << 8) | p[i];
    return v;
}

void put_floats(std::string& out, const Tensor& t) {
    for (std::int64_t i = 0; i < t.numel(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(t[i]));
}
void get_floats(const unsigned char* p, Tensor& t) {
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(p + 4 * i, 4)));
}

json parse_json(const std::string& text, const std::string& what, ErrorKind kind) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        fail(kind, what + ": " + e.what());
    }
}

/// Walks the keys of `obj`, rejecting anything without a handler.
void for_each_key(const json& obj, const std::string& what,
                  const std::map<std::string, std::function<void(const json&)>>& handlers) {
    require(obj.is_object(), ErrorKind::config, what + " must be a JSON object");
    for (const auto& [key, value] : obj.items()) {
        const auto h = handlers.find(key);
        require(h != handlers.end(), ErrorKind::config, "unknown " + what + " key '" + key + "'");
        try {
            h->second(value);
        } catch (const json::exception& e) {
            fail(ErrorKind::config, what + " key '" + key + "': " + e.what());
        }
    }
}

Extent3 extent_of(const json& v) {
    if (v.is_number_integer()) {
        const auto n = v.get<std::int64_t>();
        return {n, n, n};
    }
    const auto a = v.get<std::vector<std::int64_t>>();
    require(a.size() == 3, ErrorKind::config, "extents are [z, y, x]");
    return {a[0], a[1], a[2]};
}
json extent_json(const Extent3& e) { return json::array({e.z, e.y, e.x}); }

const char* policy_name(StepPolicy p) {
    return p == StepPolicy::runtime_extent ? "runtime-extent" : "frozen-training-extent";
}
StepPolicy parse_policy(const std::string& s) {
    if (s == "runtime-extent") return StepPolicy::runtime_extent;
    if (s == "frozen-training-extent") return StepPolicy::frozen_training_extent;
    fail(ErrorKind::config, "step_policy must be runtime-extent or frozen-training-extent, got '" + s + "'");
}
const char* upsample_name(UpsampleMode m) { return m == UpsampleMode::nearest ? "nearest" : "trilinear"; }
UpsampleMode parse_upsample(const std::string& s) {
    if (s == "nearest") return UpsampleMode::nearest;
    if (s == "trilinear") return UpsampleMode::trilinear;
    fail(ErrorKind::config, "upsample must be nearest or trilinear, got '" + s + "'");
}

json config_json(const ModelConfig& c) {
    json j;
    j["levels"] = c.levels;
    j["scale"] = c.scale;
    j["kernel_sizes"] = c.kernel_sizes;
    j["channels"] = c.channels;
    j["hidden"] = c.hidden;
    j["fire_rate"] = c.fire_rate;
    j["step_policy"] = policy_name(c.step_policy);
    j["legacy_extra_downscale"] = c.legacy_extra_downscale;
    j["upsample"] = upsample_name(c.upsample);
    j["fixed_steps"] = c.fixed_steps;
    j["training_extent"] = extent_json(c.training_extent);
    return j;
}

ModelConfig config_from(const json& j, ModelConfig c) {
    for_each_key(j, "model config",
                 {{"levels", [&](const json& v) { c.levels = v.get<int>(); }},
                  {"scale", [&](const json& v) { c.scale = v.get<int>(); }},
                  {"kernel_sizes", [&](const json& v) { c.kernel_sizes = v.get<std::vector<int>>(); }},
                  {"channels", [&](const json& v) { c.channels = v.get<int>(); }},
                  {"hidden", [&](const json& v) { c.hidden = v.get<int>(); }},
                  {"fire_rate", [&](const json& v) { c.fire_rate = v.get<float>(); }},
                  {"step_policy", [&](const json& v) { c.step_policy = parse_policy(v.get<std::string>()); }},
                  {"legacy_extra_downscale", [&](const json& v) { c.legacy_extra_downscale = v.get<bool>(); }},
                  {"upsample", [&](const json& v) { c.upsample = parse_upsample(v.get<std::string>()); }},
                  {"fixed_steps", [&](const json& v) { c.fixed_steps = v.get<std::vector<int>>(); }},
                  {"training_extent", [&](const json& v) { c.training_extent = extent_of(v); }}});
    c.validate();
    return c;
}

/// Tensors stored per level, in file order.
std::vector<std::pair<std::string, Tensor*>> stored_tensors(NcaLayerParams& p) {
    return {{"perception", &p.perception}, {"dense1.weight", &p.w1},       {"dense1.bias", &p.b1},
            {"bn.gamma", &p.gamma},        {"bn.beta", &p.beta},           {"bn.running_mean", &p.bn.running_mean},
            {"bn.running_var", &p.bn.running_var}, {"dense2.weight", &p.w2}, {"dense2.bias", &p.b2}};
}

fs::path sibling(const std::string& manifest_path, const std::string& name) {
    return fs::path(manifest_path).parent_path() / name;
}

std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open '" + path.string() + "' for reading");
    std::ostringstream s;
    s << in.rdbuf();
    require(!in.bad(), ErrorKind::io, "error while reading '" + path.string() + "'");
    return s.str();
}

}  // namespace

ElementType parse_element_type(const std::string& name) {
    if (name == "f32") return ElementType::f32;
    if (name == "u8") return ElementType::u8;
    fail(ErrorKind::unsupported_format, "unknown element type '" + name + "' (f32, u8)");
}

const char* to_string(ElementType t) { return t == ElementType::f32 ? "f32" : "u8"; }

std::string read_text(const std::string& path) { return read_bytes(path); }

void write_text(const std::string& path, const std::string& content) {
    const fs::path target(path);
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), ErrorKind::io, "cannot open '" + tmp.string() + "' for writing");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        require(static_cast<bool>(out), ErrorKind::io, "error while writing '" + tmp.string() + "'");
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    require(!ec, ErrorKind::io, "cannot move '" + tmp.string() + "' to '" + path + "': " + ec.message());
}

// ---------------------------------------------------------------------------
// Volumes

void write_volume(const std::string& manifest_path, const Tensor& data, const VolumeInfo& info) {
    require(data.rank() == 5 && data.dim(0) == 1 && data.dim(1) == 1, ErrorKind::shape,
            "write_volume expects a [1,1,z,y,x] tensor");
    const fs::path mp(manifest_path);
    require(mp.extension() == ".json", ErrorKind::io, "volume manifests use the .json extension");
    const std::string raw_name = mp.stem().string() + ".raw";

    std::string raw;
    if (info.element_type == ElementType::f32) {
        raw.reserve(static_cast<std::size_t>(data.numel()) * 4);
        put_floats(raw, data);
    } else {
        raw.reserve(static_cast<std::size_t>(data.numel()));
        for (std::int64_t i = 0; i < data.numel(); ++i)
            raw.push_back(static_cast<char>(std::lround(std::clamp(static_cast<double>(data[i]), 0.0, 1.0) * 255.0)));
    }

    json j;
    j["format"] = "m3dnca-volume";
    j["version"] = 1;
    j["extent"] = extent_json(data.extent());
    j["axis_order"] = "zyx";
    j["element_type"] = to_string(info.element_type);
    j["byte_order"] = "little";
    j["data"] = raw_name;
    j["scale"] = info.element_type == ElementType::u8 ? 1.0 / 255.0 : 1.0;
    if (info.spacing_mm) j["spacing_mm"] = *info.spacing_mm;
    if (info.source_range) j["source_range"] = *info.source_range;
    write_text(sibling(manifest_path, raw_name).string(), raw);
    write_text(manifest_path, j.dump(2) + "\n");
}

Volume read_volume(const std::string& manifest_path) {
    const json j = parse_json(read_bytes(manifest_path), "volume manifest '" + manifest_path + "'",
                              ErrorKind::corrupt_file);
    Volume v;
    Extent3 e;
    std::string data_name;
    try {
        require(j.value("format", "") == "m3dnca-volume", ErrorKind::unsupported_format,
                "'" + manifest_path + "' is not a volume manifest");
        require(j.at("version").get<int>() == 1, ErrorKind::unsupported_format, "unsupported volume manifest version");
        require(j.value("axis_order", "zyx") == "zyx", ErrorKind::unsupported_format, "only zyx axis order is supported");
        require(j.value("byte_order", "little") == "little", ErrorKind::unsupported_format,
                "only little-endian data is supported");
        e = extent_of(j.at("extent"));
        v.info.element_type = parse_element_type(j.at("element_type").get<std::string>());
        data_name = j.at("data").get<std::string>();
        if (j.contains("spacing_mm")) v.info.spacing_mm = j["spacing_mm"].get<std::array<double, 3>>();
        if (j.contains("source_range")) v.info.source_range = j["source_range"].get<std::array<double, 2>>();
    } catch (const json::exception& ex) {
        fail(ErrorKind::corrupt_file, "volume manifest '" + manifest_path + "': " + ex.what());
    }
    require(e.z >= 1 && e.y >= 1 && e.x >= 1, ErrorKind::corrupt_file, "volume extents must be positive");
    require(fs::path(data_name).filename() == fs::path(data_name), ErrorKind::corrupt_file,
            "volume data must sit next to its manifest");
    const std::string raw = read_bytes(sibling(manifest_path, data_name));
    const std::size_t elem = v.info.element_type == ElementType::f32 ? 4 : 1;
    const std::size_t expected = static_cast<std::size_t>(e.voxels()) * elem;
    require(raw.size() == expected, ErrorKind::corrupt_file,
            "volume data '" + data_name + "' has " + std::to_string(raw.size()) + " bytes, expected " +
                std::to_string(expected));
    v.data = Tensor::volume(1, 1, e);
    const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
    if (v.info.element_type == ElementType::f32) {
        get_floats(p, v.data);
    } else {
        v.info.scale = 1.0 / 255.0;
        for (std::int64_t i = 0; i < v.data.numel(); ++i) v.data[i] = static_cast<float>(p[i] / 255.0);
    }
    return v;
}

Volume read_nifti1(const std::string& path) {
    const std::string bytes = read_bytes(path);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    require(!(bytes.size() >= 2 && p[0] == 0x1f && p[1] == 0x8b), ErrorKind::unsupported_format,
            "'" + path + "' is gzip-compressed; decompress first (for example with gunzip)");
    require(bytes.size() >= 348, ErrorKind::corrupt_file, "'" + path + "' is shorter than a NIfTI-1 header");

    // dim[0] must be 1..7; when it is not, the header was written big-endian.
    bool big = false;
    auto dim0 = get_le(p + 40, 2);
    if (dim0 < 1 || dim0 > 7) {
        big = true;
        dim0 = get_be(p + 40, 2);
        require(dim0 >= 1 && dim0 <= 7, ErrorKind::corrupt_file, "NIfTI dim[0] is invalid in either byte order");
    }
    auto u = [&](std::size_t off, int n) { return big ? get_be(p + off, n) : get_le(p + off, n); };
    auto i16 = [&](std::size_t off) { return static_cast<std::int16_t>(u(off, 2)); };
    auto f32 = [&](std::size_t off) { return std::bit_cast<float>(static_cast<std::uint32_t>(u(off, 4))); };

    require(u(0, 4) == 348, ErrorKind::corrupt_file, "NIfTI sizeof_hdr is not 348");
    require(std::memcmp(p + 344, "n+1\0", 4) == 0, ErrorKind::unsupported_format,
            std::memcmp(p + 344, "ni1\0", 4) == 0 ? "two-file NIfTI (.hdr/.img) is not supported; convert to .nii"
                                                  : "'" + path + "' lacks the NIfTI-1 magic");

    std::int64_t dim[8];
    for (int i = 0; i < 8; ++i) dim[i] = i16(40 + 2 * static_cast<std::size_t>(i));
    for (int i = 1; i <= 3; ++i)
        if (i > dim[0]) dim[i] = 1;
    for (int i = 1; i <= 3; ++i) require(dim[i] >= 1, ErrorKind::corrupt_file, "NIfTI spatial dims must be positive");
    for (int i = 4; i <= dim[0]; ++i)
        require(dim[i] == 1, ErrorKind::unsupported_format, "only 3D NIfTI volumes are supported (dim[" +
                                                                std::to_string(i) + "] = " + std::to_string(dim[i]) + ")");

    const int datatype = i16(70);
    std::size_t elem = 0;
    switch (datatype) {
        case 2: elem = 1; break;   // uint8
        case 4: elem = 2; break;   // int16
        case 16: elem = 4; break;  // float32
        default:
            fail(ErrorKind::unsupported_format,
                 "NIfTI datatype " + std::to_string(datatype) + " is not supported (uint8, int16, float32)");
    }
    const float offset_f = f32(108);
    require(std::isfinite(offset_f) && offset_f >= 348.0f, ErrorKind::corrupt_file, "NIfTI vox_offset is invalid");
    const auto offset = static_cast<std::size_t>(offset_f);
    const Extent3 e{dim[3], dim[2], dim[1]};
    const std::size_t need = static_cast<std::size_t>(e.voxels()) * elem;
    require(bytes.size() >= offset && bytes.size() - offset >= need, ErrorKind::corrupt_file,
            "NIfTI data is truncated: need " + std::to_string(need) + " bytes after offset " + std::to_string(offset) +
                ", file has " + std::to_string(bytes.size() > offset ? bytes.size() - offset : 0));

    const double slope = f32(112), inter = f32(116);
    const bool scaled = slope != 0.0 && std::isfinite(slope) && std::isfinite(inter);
    std::vector<double> values(static_cast<std::size_t>(e.voxels()));
    for (std::size_t i = 0; i < values.size(); ++i) {
        const std::size_t at = offset + i * elem;
        double raw = 0.0;
        if (datatype == 2) raw = p[at];
        else if (datatype == 4) raw = static_cast<std::int16_t>(u(at, 2));
        else raw = std::bit_cast<float>(static_cast<std::uint32_t>(u(at, 4)));
        values[i] = scaled ? slope * raw + inter : raw;
        require(std::isfinite(values[i]), ErrorKind::corrupt_file, "NIfTI data contains non-finite values");
    }

    Volume v;
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    v.info.source_range = std::array<double, 2>{*lo, *hi};
    v.info.spacing_mm = std::array<double, 3>{f32(76 + 12), f32(76 + 8), f32(76 + 4)};
    v.data = renormalize(values, Tensor::volume(1, 1, e).shape());
    return v;
}

Volume read_any(const std::string& path) {
    const fs::path p(path);
    if (p.extension() == ".json") return read_volume(path);
    if (p.extension() == ".nii") return read_nifti1(path);
    if (p.extension() == ".gz")
        fail(ErrorKind::unsupported_format, "'" + path + "' is compressed; decompress first (for example with gunzip)");
    fail(ErrorKind::unsupported_format, "unrecognized volume file '" + path + "' (expected .json or .nii)");
}

// ---------------------------------------------------------------------------
// Checkpoints

std::string checkpoint_bytes(const Checkpoint& ck) {
    ck.config.validate();
    require(static_cast<int>(ck.layers.size()) == ck.config.levels, ErrorKind::contract,
            "checkpoint has a different number of layers than levels");
    std::string blobs;
    json tensors = json::array();
    for (std::size_t l = 0; l < ck.layers.size(); ++l) {
        NcaLayerParams layer = ck.layers[l];
        for (const auto& [name, t] : stored_tensors(layer)) {
            json entry;
            entry["level"] = l;
            entry["name"] = name;
            entry["shape"] = t->shape();
            entry["offset"] = blobs.size();
            entry["bytes"] = static_cast<std::size_t>(t->numel()) * 4;
            tensors.push_back(entry);
            put_floats(blobs, *t);
        }
    }
    json j;
    j["format_version"] = kCheckpointVersion;
    j["config"] = config_json(ck.config);
    j["meta"] = {{"epoch", ck.meta.epoch},
                 {"optimizer_steps", ck.meta.optimizer_steps},
                 {"seed", ck.meta.seed},
                 {"loss_digest", ck.meta.loss_digest},
                 {"best_eval_dice", ck.meta.best_eval_dice}};
    j["blob_bytes"] = blobs.size();
    j["tensors"] = tensors;
    const std::string manifest = j.dump();

    std::string out(kMagic, sizeof kMagic);
    out.push_back(static_cast<char>(kCheckpointVersion));
    out.push_back('\0');
    put_u64(out, manifest.size());
    return out + manifest + blobs;
}

Checkpoint checkpoint_from_bytes(const std::string& bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    require(bytes.size() >= kPreamble && std::memcmp(p, kMagic, sizeof kMagic) == 0, ErrorKind::unsupported_format,
            "not an m3dnca checkpoint (bad magic)");
    require(p[6] == kCheckpointVersion, ErrorKind::unsupported_format,
            "checkpoint format version " + std::to_string(p[6]) + " cannot be read by this build (version " +
                std::to_string(kCheckpointVersion) + "); re-export it with a matching release");
    require(p[7] == 0, ErrorKind::corrupt_file, "checkpoint reserved byte is not zero");
    const std::uint64_t mlen = get_le(p + 8, 8);
    require(mlen <= bytes.size() - kPreamble, ErrorKind::corrupt_file, "checkpoint manifest length exceeds the file");
    const json j = parse_json(bytes.substr(kPreamble, mlen), "checkpoint manifest", ErrorKind::corrupt_file);
    const std::size_t blob_start = kPreamble + mlen;
    const std::size_t blob_size = bytes.size() - blob_start;

    Checkpoint ck;
    try {
        require(j.at("format_version").get<int>() == kCheckpointVersion, ErrorKind::unsupported_format,
                "checkpoint manifest version does not match its header");
        ck.config = config_from(j.at("config"), ModelConfig{});
        const json& m = j.at("meta");
        ck.meta.epoch = m.at("epoch").get<std::int64_t>();
        ck.meta.optimizer_steps = m.at("optimizer_steps").get<std::int64_t>();
        ck.meta.seed = m.at("seed").get<std::uint64_t>();
        ck.meta.loss_digest = m.at("loss_digest").get<std::uint64_t>();
        ck.meta.best_eval_dice = m.at("best_eval_dice").get<double>();
        require(j.at("blob_bytes").get<std::uint64_t>() == blob_size, ErrorKind::corrupt_file,
                "checkpoint blob section has " + std::to_string(blob_size) + " bytes, manifest says " +
                    std::to_string(j.at("blob_bytes").get<std::uint64_t>()));

        // Shapes come from a fresh model of the same config.
        ck.layers = init_model(ck.config, 0);
        std::map<std::pair<int, std::string>, Tensor*> slots;
        for (int l = 0; l < ck.config.levels; ++l)
            for (const auto& [name, t] : stored_tensors(ck.layers[static_cast<std::size_t>(l)])) slots[{l, name}] = t;
        std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
        for (const json& entry : j.at("tensors")) {
            const int level = entry.at("level").get<int>();
            const std::string name = entry.at("name").get<std::string>();
            const auto slot = slots.find({level, name});
            require(slot != slots.end(), ErrorKind::corrupt_file,
                    "checkpoint tensor '" + name + "' at level " + std::to_string(level) + " is unknown or repeated");
            Tensor& t = *slot->second;
            require(entry.at("shape").get<Shape>() == t.shape(), ErrorKind::corrupt_file,
                    "checkpoint tensor '" + name + "' has shape " + m3dnca::to_string(entry.at("shape").get<Shape>()) +
                        ", config implies " + m3dnca::to_string(t.shape()));
            const auto off = entry.at("offset").get<std::uint64_t>();
            const auto len = entry.at("bytes").get<std::uint64_t>();
            require(len == static_cast<std::uint64_t>(t.numel()) * 4 && off <= blob_size && len <= blob_size - off,
                    ErrorKind::corrupt_file, "checkpoint tensor '" + name + "' lies outside the blob section");
            get_floats(p + blob_start + off, t);
            ranges.push_back({off, len});
            slots.erase(slot);
        }
        require(slots.empty(), ErrorKind::corrupt_file,
                "checkpoint is missing tensor '" + (slots.empty() ? std::string() : slots.begin()->first.second) + "'");
        std::sort(ranges.begin(), ranges.end());
        for (std::size_t i = 1; i < ranges.size(); ++i)
            require(ranges[i - 1].first + ranges[i - 1].second <= ranges[i].first, ErrorKind::corrupt_file,
                    "checkpoint tensors overlap");
    } catch (const json::exception& e) {
        fail(ErrorKind::corrupt_file, std::string("checkpoint manifest: ") + e.what());
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::config) fail(ErrorKind::corrupt_file, std::string("checkpoint config: ") + e.what());
        throw;
    }
    return ck;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
    write_text(path, checkpoint_bytes(checkpoint));
}

Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_bytes(read_bytes(path)); }

// ---------------------------------------------------------------------------
// Datasets

void write_dataset(const std::string& dir, const std::vector<Sample>& samples) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorKind::io, "cannot create '" + dir + "': " + ec.message());
    json cases = json::array();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::string id = "case" + std::to_string(i);
        const std::string image = id + "_image.json", label = id + "_label.json";
        write_volume((fs::path(dir) / image).string(), samples[i].image);
        write_volume((fs::path(dir) / label).string(), samples[i].label, {ElementType::u8, {}, {}, 1.0 / 255.0});
        cases.push_back({{"id", id}, {"image", image}, {"label", label}});
    }
    json j;
    j["format"] = "m3dnca-dataset";
    j["cases"] = cases;
    write_text((fs::path(dir) / "dataset.json").string(), j.dump(2) + "\n");
}

std::vector<DatasetCase> read_dataset(const std::string& dir) {
    fs::path index = fs::path(dir);
    if (fs::is_directory(index)) index /= "dataset.json";
    const json j = parse_json(read_bytes(index), "dataset index '" + index.string() + "'", ErrorKind::corrupt_file);
    std::vector<DatasetCase> out;
    try {
        require(j.value("format", "") == "m3dnca-dataset", ErrorKind::unsupported_format,
                "'" + index.string() + "' is not a dataset index");
        for (const json& c : j.at("cases")) {
            DatasetCase dc;
            dc.id = c.at("id").get<std::string>();
            const fs::path base = index.parent_path();
            dc.sample.image = read_volume((base / c.at("image").get<std::string>()).string()).data;
            if (c.contains("label")) {
                dc.sample.label = read_volume((base / c.at("label").get<std::string>()).string()).data;
                require(dc.sample.label.shape() == dc.sample.image.shape(), ErrorKind::corrupt_file,
                        "case '" + dc.id + "': label and image extents differ");
            }
            out.push_back(std::move(dc));
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::corrupt_file, "dataset index '" + index.string() + "': " + e.what());
    }
    return out;
}

std::vector<Sample> samples_of(const std::vector<DatasetCase>& cases) {
    std::vector<Sample> out;
    for (const DatasetCase& c : cases) out.push_back(c.sample);
    return out;
}

// ---------------------------------------------------------------------------
// Configuration documents

std::string model_config_json(const ModelConfig& config) { return config_json(config).dump(2) + "\n"; }

ModelConfig parse_model_config(const std::string& text, ModelConfig base) {
    return config_from(parse_json(text, "model config", ErrorKind::config), std::move(base));
}

TrainConfig parse_train_config(const std::string& text, TrainConfig t) {
    for_each_key(parse_json(text, "train config", ErrorKind::config), "train config",
                 {{"epochs", [&](const json& v) { t.epochs = v.get<int>(); }},
                  {"batch_size", [&](const json& v) { t.batch_size = v.get<int>(); }},
                  {"dup_factor", [&](const json& v) { t.dup_factor = v.get<int>(); }},
                  {"lr", [&](const json& v) { t.adam.lr = v.get<float>(); }},
                  {"beta1", [&](const json& v) { t.adam.beta1 = v.get<float>(); }},
                  {"beta2", [&](const json& v) { t.adam.beta2 = v.get<float>(); }},
                  {"adam_eps", [&](const json& v) { t.adam.eps = v.get<float>(); }},
                  {"lr_decay", [&](const json& v) { t.lr_decay = v.get<double>(); }},
                  {"focal_gamma", [&](const json& v) { t.loss.gamma = v.get<double>(); }},
                  {"focal_alpha", [&](const json& v) { t.loss.alpha = v.get<double>(); }},
                  {"dice_eps", [&](const json& v) { t.loss.eps = v.get<double>(); }},
                  {"seed", [&](const json& v) { t.seed = v.get<std::uint64_t>(); }},
                  {"eval_every", [&](const json& v) { t.eval_every = v.get<int>(); }},
                  {"eval_seed", [&](const json& v) { t.eval_seed = v.get<std::uint64_t>(); }}});
    t.validate();
    return t;
}

SyntheticSpec parse_synthetic_spec(const std::string& text, SyntheticSpec s) {
    for_each_key(parse_json(text, "synthetic spec", ErrorKind::config), "synthetic spec",
                 {{"extent", [&](const json& v) { s.extent = extent_of(v); }},
                  {"family", [&](const json& v) { s.family = parse_shape_family(v.get<std::string>()); }},
                  {"radius_min", [&](const json& v) { s.radius_min = v.get<double>(); }},
                  {"radius_max", [&](const json& v) { s.radius_max = v.get<double>(); }},
                  {"center_jitter", [&](const json& v) { s.center_jitter = v.get<double>(); }},
                  {"foreground_mean", [&](const json& v) { s.foreground_mean = v.get<double>(); }},
                  {"background_mean", [&](const json& v) { s.background_mean = v.get<double>(); }},
                  {"noise_std", [&](const json& v) { s.noise_std = v.get<double>(); }},
                  {"bias_strength", [&](const json& v) { s.bias_strength = v.get<double>(); }},
                  {"count", [&](const json& v) { s.count = v.get<int>(); }}});
    s.validate();
    return s;
}

ConfigSections split_config(const std::string& text) {
    ConfigSections out;
    for_each_key(parse_json(text, "config file", ErrorKind::config), "config file",
                 {{"model", [&](const json& v) { out.model = v.dump(); }},
                  {"train", [&](const json& v) { out.train = v.dump(); }},
                  {"synth", [&](const json& v) { out.synth = v.dump(); }}});
    return out;
}

}  // namespace m3dnca::io
