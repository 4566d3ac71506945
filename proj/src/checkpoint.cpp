#include "attnbench/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "attnbench/errors.hpp"

namespace attnbench {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'A', 'T', 'T', 'N', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::uint64_t fnv1a(const std::vector<char>& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

struct RawCheckpoint {
    json manifest;
    std::vector<char> data;
};

RawCheckpoint read_raw(const std::filesystem::path& path, bool with_data) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + path.string());
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t manifest_size = 0;
    in.read(magic, 8);
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&manifest_size), sizeof manifest_size);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) throw FormatError(path.string() + ": not a checkpoint file");
    if (version != kCheckpointVersion) {
        throw FormatError(path.string() + ": checkpoint format version " + std::to_string(version) +
                          ", this build reads version " + std::to_string(kCheckpointVersion));
    }
    if (manifest_size > (1ULL << 30)) throw FormatError(path.string() + ": implausible manifest size");
    std::string text(manifest_size, '\0');
    in.read(text.data(), static_cast<std::streamsize>(manifest_size));
    if (!in) throw FormatError(path.string() + ": truncated manifest");
    RawCheckpoint raw;
    try {
        raw.manifest = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": manifest is not valid JSON (" + e.what() + ")");
    }
    if (with_data) {
        raw.data.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    return raw;
}

CheckpointInfo info_from(const json& manifest, const std::filesystem::path& path) {
    try {
        CheckpointInfo info;
        if (manifest.at("format_version").get<std::uint32_t>() != kCheckpointVersion) {
            throw FormatError(path.string() + ": manifest version disagrees with header");
        }
        info.config = ModelConfig::from_fields(manifest.at("config").get<std::map<std::string, std::string>>());
        if (manifest.contains("metadata")) {
            info.metadata = manifest.at("metadata").get<std::map<std::string, std::string>>();
        }
        return info;
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": malformed manifest (" + e.what() + ")");
    } catch (const ConfigError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void fill_parameters(const RawCheckpoint& raw, const std::filesystem::path& path, Seq2SeqModel& model) {
    if (raw.data.size() % sizeof(float) != 0) throw FormatError(path.string() + ": data block is not whole floats");
    if (raw.manifest.value("checksum", std::string()) != std::to_string(fnv1a(raw.data))) {
        throw FormatError(path.string() + ": data checksum mismatch");
    }
    const std::size_t n_floats = raw.data.size() / sizeof(float);
    auto& entries = model.parameters().entries();
    try {
        const json& tensors = raw.manifest.at("tensors");
        if (tensors.size() != entries.size()) {
            throw FormatError(path.string() + ": " + std::to_string(tensors.size()) + " tensors stored, model has " +
                              std::to_string(entries.size()));
        }
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const json& t = tensors[i];
            const auto name = t.at("name").get<std::string>();
            const auto shape = t.at("shape").get<Shape>();
            const auto offset = t.at("offset").get<std::size_t>();
            const Tensor& p = entries[i].tensor;
            if (name != entries[i].name || shape != p.shape()) {
                throw FormatError(path.string() + ": tensor " + std::to_string(i) + " is " + name +
                                  shape_string(shape) + ", model expects " + entries[i].name +
                                  shape_string(p.shape()));
            }
            if (offset > n_floats || p.numel() > n_floats - offset) {
                throw FormatError(path.string() + ": tensor " + name + " runs past the data block");
            }
            auto out = p.mutable_data();
            for (std::size_t j = 0; j < out.size(); ++j) {
                float f;
                std::memcpy(&f, raw.data.data() + (offset + j) * sizeof(float), sizeof f);
                out[j] = static_cast<double>(f);
            }
        }
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": malformed tensor table (" + e.what() + ")");
    }
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const Seq2SeqModel& model,
                     const std::map<std::string, std::string>& metadata) {
    std::vector<char> data;
    json tensors = json::array();
    std::size_t offset = 0;
    for (const auto& e : model.parameters().entries()) {
        tensors.push_back({{"name", e.name}, {"shape", e.tensor.shape()}, {"offset", offset}});
        for (double v : e.tensor.data()) {
            const float f = static_cast<float>(v);
            char bytes[sizeof f];
            std::memcpy(bytes, &f, sizeof f);
            data.insert(data.end(), bytes, bytes + sizeof f);
        }
        offset += e.tensor.numel();
    }
    json manifest = {{"format_version", kCheckpointVersion},
                     {"config", model.config().to_fields()},
                     {"metadata", metadata},
                     {"tensors", tensors},
                     {"checksum", std::to_string(fnv1a(data))}};
    const std::string text = manifest.dump();
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t size = text.size();

    // Write beside the target and rename so a crash never leaves a torn file.
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write checkpoint " + tmp.string());
        out.write(kMagic, 8);
        out.write(reinterpret_cast<const char*>(&version), sizeof version);
        out.write(reinterpret_cast<const char*>(&size), sizeof size);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        if (!out) throw FormatError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
    return info_from(read_raw(path, false).manifest, path);
}

std::unique_ptr<Seq2SeqModel> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info) {
    const RawCheckpoint raw = read_raw(path, true);
    CheckpointInfo parsed = info_from(raw.manifest, path);
    Rng scratch(0);
    std::unique_ptr<Seq2SeqModel> model;
    try {
        model = build_model(parsed.config, scratch);
    } catch (const ConfigError& e) {
        throw FormatError(path.string() + ": stored config is invalid: " + e.what());
    }
    fill_parameters(raw, path, *model);
    if (info) *info = std::move(parsed);
    return model;
}

void load_parameters(const std::filesystem::path& path, Seq2SeqModel& model) {
    const RawCheckpoint raw = read_raw(path, true);
    const CheckpointInfo info = info_from(raw.manifest, path);
    if (!(info.config == model.config())) {
        throw FormatError(path.string() + ": stored " + family_name(info.config.family) +
                          " config does not match the target model");
    }
    fill_parameters(raw, path, model);
}

} // namespace attnbench
