#ifndef INSTAB_CHECKPOINT_HPP
#define INSTAB_CHECKPOINT_HPP

// Parameter checkpoint: a JSON manifest (tensor names, shapes, config hash)
// followed by contiguous little-endian float32 data.

#include <fstream>
#include <string>

#include <json.hpp>

#include "instab/model.hpp"

namespace instab {

inline constexpr char kCheckpointMagic[4] = {'I', 'T', 'C', 'K'};

inline void save_checkpoint(const std::string& path, ParamSet<float>& params,
                            const std::string& config_hash) {
    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["config_hash"] = config_hash;
    manifest["tensors"] = nlohmann::json::array();
    auto refs = params.tensor_refs();
    for (const auto& ref : refs)
        manifest["tensors"].push_back({{"name", ref.name}, {"rows", ref.rows}, {"cols", ref.cols}});
    const std::string mtext = manifest.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("save_checkpoint: cannot open " + path);
    out.write(kCheckpointMagic, 4);
    auto mlen = static_cast<std::uint64_t>(mtext.size());
    char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((mlen >> (8 * i)) & 0xff);
    out.write(lenbuf, 8);
    out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    for (const auto& ref : refs)
        out.write(reinterpret_cast<const char*>(ref.data),
                  static_cast<std::streamsize>(ref.size() * sizeof(float)));
    if (!out) throw DataError("save_checkpoint: write failed for " + path);
}

// Loads into a parameter set freshly shaped from `cfg`; the manifest must
// match the shapes and, when `expect_hash` is nonempty, the config hash.
inline ParamSet<float> load_checkpoint(const std::string& path, const ModelConfig& cfg,
                                       const std::string& expect_hash = "") {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("load_checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != std::string(kCheckpointMagic, 4))
        throw DataError("load_checkpoint: bad magic in " + path);
    char lenbuf[8];
    in.read(lenbuf, 8);
    std::uint64_t mlen = 0;
    for (int i = 7; i >= 0; --i) mlen = (mlen << 8) | static_cast<unsigned char>(lenbuf[i]);
    std::string mtext(mlen, '\0');
    in.read(mtext.data(), static_cast<std::streamsize>(mlen));
    if (!in) throw DataError("load_checkpoint: truncated manifest in " + path);
    nlohmann::json manifest = nlohmann::json::parse(mtext);
    if (!expect_hash.empty() && manifest.at("config_hash").get<std::string>() != expect_hash)
        throw DataError("load_checkpoint: config hash mismatch in " + path);

    ParamSet<float> params = init_parameters<float>(cfg);
    auto refs = params.tensor_refs();
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != refs.size())
        throw DataError("load_checkpoint: tensor count mismatch in " + path);
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const auto& t = tensors[i];
        if (t.at("name").get<std::string>() != refs[i].name ||
            t.at("rows").get<std::size_t>() != refs[i].rows ||
            t.at("cols").get<std::size_t>() != refs[i].cols)
            throw DataError("load_checkpoint: manifest mismatch at tensor " + refs[i].name);
        in.read(reinterpret_cast<char*>(refs[i].data),
                static_cast<std::streamsize>(refs[i].size() * sizeof(float)));
    }
    if (!in) throw DataError("load_checkpoint: truncated tensor data in " + path);
    return params;
}

}  // namespace instab

#endif  // INSTAB_CHECKPOINT_HPP
