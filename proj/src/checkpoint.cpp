#include "crackseq/nets/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "crackseq/common.hpp"

namespace crackseq::nets {

namespace {
constexpr char kMagic[8] = {'C', 'S', 'E', 'Q', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_checkpoint(const torch::nn::Module& model, const nlohmann::json& meta,
                     const std::filesystem::path& path) {
    nlohmann::json header;
    header["meta"] = meta;
    auto& tensors = header["tensors"] = nlohmann::json::array();

    std::vector<torch::Tensor> payload;
    std::uint64_t offset = 0;
    for (const auto& p : model.named_parameters()) {
        torch::Tensor t = p.value().detach().to(torch::kFloat32).contiguous();
        tensors.push_back({{"name", p.key()},
                           {"shape", t.sizes().vec()},
                           {"offset", offset},
                           {"numel", t.numel()}});
        offset += std::uint64_t(t.numel()) * sizeof(float);
        payload.push_back(t);
    }

    std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("save_checkpoint: cannot write " + path.string());
    out.write(kMagic, 8);
    std::uint32_t ver = kVersion;
    std::uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&ver), sizeof ver);
    out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    out.write(hs.data(), (std::streamsize)hs.size());
    for (const auto& t : payload)
        out.write(reinterpret_cast<const char*>(t.data_ptr<float>()),
                  (std::streamsize)(t.numel() * sizeof(float)));
}

namespace {

nlohmann::json read_header(std::ifstream& in, const std::filesystem::path& path) {
    char magic[8];
    std::uint32_t ver = 0;
    std::uint64_t hlen = 0;
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw DataError("checkpoint: bad magic in " + path.string());
    in.read(reinterpret_cast<char*>(&ver), sizeof ver);
    in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
    if (ver != kVersion) throw DataError("checkpoint: unsupported version");
    std::string hs(hlen, '\0');
    in.read(hs.data(), (std::streamsize)hlen);
    if (!in) throw DataError("checkpoint: truncated header in " + path.string());
    return nlohmann::json::parse(hs);
}

}  // namespace

nlohmann::json read_checkpoint_meta(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open " + path.string());
    return read_header(in, path).at("meta");
}

nlohmann::json load_checkpoint(torch::nn::Module& model, const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open " + path.string());
    nlohmann::json header = read_header(in, path);
    std::streampos payload_start = in.tellg();

    auto params = model.named_parameters();
    torch::NoGradGuard g;
    for (const auto& entry : header.at("tensors")) {
        std::string name = entry.at("name");
        auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
        std::uint64_t offset = entry.at("offset");
        std::int64_t numel = entry.at("numel");

        auto* dst = params.find(name);
        if (!dst) throw DataError("checkpoint: model has no parameter " + name);
        if (dst->sizes().vec() != shape)
            throw DataError("checkpoint: shape mismatch for " + name);

        torch::Tensor buf = torch::empty(shape, torch::kFloat32);
        in.seekg(payload_start + std::streampos(offset));
        in.read(reinterpret_cast<char*>(buf.data_ptr<float>()),
                (std::streamsize)(numel * sizeof(float)));
        if (!in) throw DataError("checkpoint: truncated payload for " + name);
        dst->copy_(buf.to(dst->dtype()));
    }
    return header.at("meta");
}

}  // namespace crackseq::nets
