#pragma once

// RDL1 container: magic, a key=value text header, then named float32
// little-endian tensors.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rdlab/dataset.hpp"
#include "rdlab/errors.hpp"
#include "rdlab/model.hpp"
#include "rdlab/prompting.hpp"

namespace rdlab {

inline constexpr char kCheckpointMagic[4] = {'R', 'D', 'L', '1'};

struct CheckpointMeta {
    ModelConfig config;
    std::uint64_t vocab_fingerprint = 0;
    std::vector<std::string> specials;
    std::int64_t step = 0;
    std::string experiment;
    double val_accuracy = 0.0;
    double val_mse = 0.0;
    std::map<std::string, std::string> extras;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

inline std::uint32_t get_u32(const std::string& in, std::size_t& pos)
{
    if (pos + 4 > in.size()) {
        throw CheckpointError("checkpoint truncated");
    }
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)])) << (8 * i);
    }
    pos += 4;
    return v;
}

inline std::string join_specials(const std::vector<std::string>& names)
{
    std::string out;
    for (std::size_t i = 0; i < names.size(); ++i) {
        out += (i ? " " : "") + names[i];
    }
    return out;
}

inline std::vector<std::string> split_specials(const std::string& s)
{
    std::vector<std::string> out;
    std::istringstream in(s);
    for (std::string w; in >> w;) {
        out.push_back(w);
    }
    return out;
}

inline std::string fmt_real(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace detail

inline std::string meta_header(const CheckpointMeta& meta)
{
    std::string out;
    for (const auto& [k, v] : meta.config.to_map()) {
        out += "config." + k + "=" + v + "\n";
    }
    out += "vocab_fingerprint=" + hex64(meta.vocab_fingerprint) + "\n";
    out += "specials=" + detail::join_specials(meta.specials) + "\n";
    out += "step=" + std::to_string(meta.step) + "\n";
    out += "experiment=" + meta.experiment + "\n";
    out += "val_accuracy=" + detail::fmt_real(meta.val_accuracy) + "\n";
    out += "val_mse=" + detail::fmt_real(meta.val_mse) + "\n";
    for (const auto& [k, v] : meta.extras) {
        out += "extra." + k + "=" + v + "\n";
    }
    return out;
}

inline CheckpointMeta parse_meta_header(const std::string& text)
{
    CheckpointMeta meta;
    std::map<std::string, std::string> cfg;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw CheckpointError("bad checkpoint header line: " + line);
        }
        const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
        if (key.rfind("config.", 0) == 0) {
            cfg[key.substr(7)] = value;
        } else if (key.rfind("extra.", 0) == 0) {
            meta.extras[key.substr(6)] = value;
        } else if (key == "vocab_fingerprint") {
            meta.vocab_fingerprint = std::stoull(value, nullptr, 16);
        } else if (key == "specials") {
            meta.specials = detail::split_specials(value);
        } else if (key == "step") {
            meta.step = std::stoll(value);
        } else if (key == "experiment") {
            meta.experiment = value;
        } else if (key == "val_accuracy") {
            meta.val_accuracy = std::stod(value);
        } else if (key == "val_mse") {
            meta.val_mse = std::stod(value);
        }
    }
    meta.config = ModelConfig::from_map(cfg);
    return meta;
}

/// Raw little-endian float32 bytes of one tensor.
template <class T>
std::string tensor_bytes(const Mat<T>& m)
{
    std::string out;
    out.reserve(static_cast<std::size_t>(m.size()) * 4);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(m.data()[i])));
    }
    return out;
}

template <class T>
std::string checkpoint_bytes(const Model<T>& model, const CheckpointMeta& meta)
{
    std::string out(kCheckpointMagic, 4);
    const std::string header = meta_header(meta);
    detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
    out += header;
    const auto params = model.params();
    detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto* p : params) {
        detail::put_u32(out, static_cast<std::uint32_t>(p->name.size()));
        out += p->name;
        detail::put_u32(out, static_cast<std::uint32_t>(p->value.rows()));
        detail::put_u32(out, static_cast<std::uint32_t>(p->value.cols()));
        out += tensor_bytes(p->value);
    }
    return out;
}

template <class T>
void save_checkpoint(const Model<T>& model, CheckpointMeta meta, const std::filesystem::path& path)
{
    meta.config = model.config();
    const std::string bytes = checkpoint_bytes(model, meta);
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw CheckpointError("cannot write " + tmp);
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw CheckpointError("write failed: " + tmp);
        }
    }
    std::filesystem::rename(tmp, path);
}

struct LoadedCheckpoint {
    Model<float> model;
    CheckpointMeta meta;
};

inline CheckpointMeta read_checkpoint_meta(const std::string& bytes, std::size_t& pos)
{
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw CheckpointError("not an RDL1 checkpoint");
    }
    pos = 4;
    const std::uint32_t header_len = detail::get_u32(bytes, pos);
    if (pos + header_len > bytes.size()) {
        throw CheckpointError("checkpoint truncated in header");
    }
    CheckpointMeta meta = parse_meta_header(bytes.substr(pos, header_len));
    pos += header_len;
    return meta;
}

inline std::string read_file_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError("cannot open checkpoint " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Loads a checkpoint; when `expected_fingerprint` is given it must match the
/// stored vocabulary fingerprint.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                        std::optional<std::uint64_t> expected_fingerprint = std::nullopt)
{
    const std::string bytes = read_file_bytes(path);
    std::size_t pos = 0;
    CheckpointMeta meta = read_checkpoint_meta(bytes, pos);
    if (expected_fingerprint && *expected_fingerprint != meta.vocab_fingerprint) {
        throw CheckpointError("vocabulary fingerprint mismatch: checkpoint has " + hex64(meta.vocab_fingerprint) +
                              ", expected " + hex64(*expected_fingerprint));
    }
    Model<float> model(meta.config);
    std::map<std::string, Param<float>*> by_name;
    for (auto* p : model.params()) {
        by_name[p->name] = p;
    }
    const std::uint32_t count = detail::get_u32(bytes, pos);
    if (count != by_name.size()) {
        throw CheckpointError("checkpoint tensor count mismatch");
    }
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::uint32_t name_len = detail::get_u32(bytes, pos);
        if (pos + name_len > bytes.size()) {
            throw CheckpointError("checkpoint truncated in tensor name");
        }
        const std::string name = bytes.substr(pos, name_len);
        pos += name_len;
        const std::uint32_t rows = detail::get_u32(bytes, pos);
        const std::uint32_t cols = detail::get_u32(bytes, pos);
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw CheckpointError("unknown tensor " + name);
        }
        Mat<float>& v = it->second->value;
        if (v.rows() != rows || v.cols() != cols) {
            throw CheckpointError("shape mismatch for tensor " + name);
        }
        for (Eigen::Index i = 0; i < v.size(); ++i) {
            v.data()[i] = std::bit_cast<float>(detail::get_u32(bytes, pos));
        }
    }
    if (pos != bytes.size()) {
        throw CheckpointError("trailing bytes after checkpoint tensors");
    }
    return {std::move(model), std::move(meta)};
}

/// Builtin vocabulary plus the checkpoint's registered specials, checked
/// against the stored fingerprint.
inline TokenVocab vocab_for(const CheckpointMeta& meta, const PromptAssets& assets = builtin_prompt_assets())
{
    TokenVocab vocab = register_special_tokens(TokenVocab::build(assets), meta.specials).vocab;
    if (vocab.fingerprint() != meta.vocab_fingerprint) {
        throw CheckpointError("vocabulary fingerprint mismatch: checkpoint has " + hex64(meta.vocab_fingerprint) +
                              ", rebuilt vocabulary has " + hex64(vocab.fingerprint()));
    }
    return vocab;
}

/// fnv1a64 over the serialized bytes of one parameter group.
template <class T>
std::uint64_t group_checksum(const Model<T>& model, ParamGroup group)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto* p : model.params()) {
        if (p->group == group) {
            h = fnv1a64(p->name, h);
            h = fnv1a64(tensor_bytes(p->value), h);
        }
    }
    return h;
}

} // namespace rdlab
