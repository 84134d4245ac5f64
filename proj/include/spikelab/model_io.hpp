#pragma once
// Checkpoint container: magic "GSLM", u32 version, u32 header length, JSON
// header (config, optional spike/grammar blocks, ordered tensor manifest),
// then raw little-endian f32 payloads, each 64-byte aligned. Serialization is
// byte-deterministic so file fingerprints identify a model exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "json.hpp"
#include "spikelab/ioutil.hpp"
#include "spikelab/model.hpp"

namespace spikelab {

static_assert(std::endian::native == std::endian::little,
              "container writer assumes a little-endian host");

inline constexpr uint32_t kContainerVersion = 1;
inline constexpr size_t kPayloadAlign = 64;

namespace detail {

inline void append_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

inline void pad_to(std::vector<uint8_t>& out, size_t align) {
    while (out.size() % align != 0) out.push_back(0);
}

struct NamedTensor {
    std::string name;
    const Tensor* tensor;
};

inline std::vector<NamedTensor> tensor_manifest(const Model& m) {
    std::vector<NamedTensor> list;
    list.push_back({"embedding", &m.weights.embedding});
    list.push_back({"lm_head", &m.weights.lm_head});
    list.push_back({"final_norm", &m.weights.final_norm});
    for (size_t l = 0; l < m.weights.layers.size(); ++l) {
        const LayerWeights& lw = m.weights.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        list.push_back({p + "attn_norm", &lw.attn_norm});
        list.push_back({p + "wq", &lw.wq});
        list.push_back({p + "wk", &lw.wk});
        list.push_back({p + "wv", &lw.wv});
        list.push_back({p + "wo", &lw.wo});
        list.push_back({p + "ffn_norm", &lw.ffn_norm});
        if (m.config.is_glu()) list.push_back({p + "w_gate", &lw.w_gate});
        list.push_back({p + "w_up", &lw.w_up});
        list.push_back({p + "w_down", &lw.w_down});
    }
    return list;
}

}  // namespace detail

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{
        {"n_layers", c.n_layers},     {"d_model", c.d_model},
        {"n_heads", c.n_heads},       {"d_head", c.d_head},
        {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size},
        {"ffn_kind", ffn_kind_name(c.ffn_kind)},
        {"norm_kind", "rmsnorm"},     {"norm_eps", c.norm_eps},
        {"rope_theta", c.rope_theta}, {"bos_id", c.bos_id},
        {"max_positions", c.max_positions}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int32_t>();
    c.d_model = j.at("d_model").get<int32_t>();
    c.n_heads = j.at("n_heads").get<int32_t>();
    c.d_head = j.at("d_head").get<int32_t>();
    c.d_ff = j.at("d_ff").get<int32_t>();
    c.vocab_size = j.at("vocab_size").get<int32_t>();
    c.ffn_kind = parse_ffn_kind(j.at("ffn_kind").get<std::string>());
    if (j.at("norm_kind").get<std::string>() != "rmsnorm")
        throw std::runtime_error("container: unsupported norm kind");
    c.norm_eps = j.at("norm_eps").get<float>();
    c.rope_theta = j.at("rope_theta").get<double>();
    c.bos_id = j.at("bos_id").get<int32_t>();
    c.max_positions = j.at("max_positions").get<int32_t>();
    return c;
}

inline std::vector<uint8_t> serialize_model(const Model& m) {
    m.config.validate();
    const auto manifest = detail::tensor_manifest(m);

    // Offsets are relative to the payload section start so the header text
    // does not depend on its own length.
    nlohmann::json tensors = nlohmann::json::array();
    size_t rel = 0;
    for (const auto& nt : manifest) {
        rel = (rel + kPayloadAlign - 1) / kPayloadAlign * kPayloadAlign;
        tensors.push_back({{"name", nt.name},
                           {"shape", nt.tensor->shape},
                           {"offset", rel}});
        rel += nt.tensor->numel() * sizeof(float);
    }

    nlohmann::json header{{"config", config_to_json(m.config)}, {"tensors", tensors}};
    if (m.spike) {
        header["spike"] = {{"mode", spike_mode_name(m.spike->mode)},
                           {"spike_token", m.spike->spike_token},
                           {"spike_layer", m.spike->spike_layer},
                           {"marker_dim", m.spike->marker_dim},
                           {"target_ratio", m.spike->target_ratio}};
    }
    if (m.grammar) {
        header["grammar"] = {{"alphabet", m.grammar->alphabet},
                             {"successor", m.grammar->successor},
                             {"spike_successor", m.grammar->spike_successor},
                             {"noise_eps", m.grammar->noise_eps}};
    }
    const std::string header_text = header.dump();

    std::vector<uint8_t> out;
    out.push_back('G');
    out.push_back('S');
    out.push_back('L');
    out.push_back('M');
    detail::append_u32(out, kContainerVersion);
    detail::append_u32(out, static_cast<uint32_t>(header_text.size()));
    out.insert(out.end(), header_text.begin(), header_text.end());
    detail::pad_to(out, kPayloadAlign);
    for (const auto& nt : manifest) {
        detail::pad_to(out, kPayloadAlign);
        const size_t n = out.size();
        out.resize(n + nt.tensor->numel() * sizeof(float));
        std::memcpy(out.data() + n, nt.tensor->data.data(),
                    nt.tensor->numel() * sizeof(float));
    }
    return out;
}

inline Model deserialize_model(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 12 || bytes[0] != 'G' || bytes[1] != 'S' || bytes[2] != 'L' ||
        bytes[3] != 'M')
        throw std::runtime_error("container: bad magic");
    uint32_t version = 0, header_len = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    std::memcpy(&header_len, bytes.data() + 8, 4);
    if (version != kContainerVersion) throw std::runtime_error("container: unsupported version");
    if (bytes.size() < 12 + static_cast<size_t>(header_len))
        throw std::runtime_error("container: truncated header");
    const nlohmann::json header = nlohmann::json::parse(
        bytes.begin() + 12, bytes.begin() + 12 + header_len);

    Model m;
    m.config = config_from_json(header.at("config"));
    m.config.validate();
    if (header.contains("spike")) {
        const auto& js = header.at("spike");
        SpikeConfig s;
        s.mode = parse_spike_mode(js.at("mode").get<std::string>());
        s.spike_token = js.at("spike_token").get<int32_t>();
        s.spike_layer = js.at("spike_layer").get<int32_t>();
        s.marker_dim = js.at("marker_dim").get<int32_t>();
        s.target_ratio = js.at("target_ratio").get<double>();
        m.spike = s;
    }
    if (header.contains("grammar")) {
        const auto& jg = header.at("grammar");
        GrammarConfig g;
        g.alphabet = jg.at("alphabet").get<std::vector<int32_t>>();
        g.successor = jg.at("successor").get<std::vector<int32_t>>();
        g.spike_successor = jg.at("spike_successor").get<int32_t>();
        g.noise_eps = jg.at("noise_eps").get<double>();
        m.grammar = g;
    }

    size_t payload_base = 12 + header_len;
    payload_base = (payload_base + kPayloadAlign - 1) / kPayloadAlign * kPayloadAlign;

    m.weights.layers.resize(static_cast<size_t>(m.config.n_layers));
    auto load_into = [&](const std::string& name, const std::vector<int64_t>& shape,
                         size_t offset) {
        Tensor t = Tensor::zeros(shape);
        const size_t nbytes = t.numel() * sizeof(float);
        const size_t abs = payload_base + offset;
        if (abs + nbytes > bytes.size())
            throw std::runtime_error("container: payload out of range for " + name);
        std::memcpy(t.data.data(), bytes.data() + abs, nbytes);

        Tensor* dst = nullptr;
        if (name == "embedding") dst = &m.weights.embedding;
        else if (name == "lm_head") dst = &m.weights.lm_head;
        else if (name == "final_norm") dst = &m.weights.final_norm;
        else if (name.rfind("layers.", 0) == 0) {
            const size_t dot = name.find('.', 7);
            const int layer = std::stoi(name.substr(7, dot - 7));
            if (layer < 0 || layer >= m.config.n_layers)
                throw std::runtime_error("container: layer index out of range in " + name);
            LayerWeights& lw = m.weights.layers[static_cast<size_t>(layer)];
            const std::string field = name.substr(dot + 1);
            if (field == "attn_norm") dst = &lw.attn_norm;
            else if (field == "wq") dst = &lw.wq;
            else if (field == "wk") dst = &lw.wk;
            else if (field == "wv") dst = &lw.wv;
            else if (field == "wo") dst = &lw.wo;
            else if (field == "ffn_norm") dst = &lw.ffn_norm;
            else if (field == "w_gate") dst = &lw.w_gate;
            else if (field == "w_up") dst = &lw.w_up;
            else if (field == "w_down") dst = &lw.w_down;
        }
        if (!dst) throw std::runtime_error("container: unknown tensor " + name);
        *dst = std::move(t);
    };
    for (const auto& jt : header.at("tensors")) {
        load_into(jt.at("name").get<std::string>(),
                  jt.at("shape").get<std::vector<int64_t>>(),
                  jt.at("offset").get<size_t>());
    }
    m.fingerprint = fingerprint_bytes(bytes);
    return m;
}

inline std::string save_model(const Model& m, const std::string& path) {
    const auto bytes = serialize_model(m);
    write_file_bytes(path, bytes);
    return fingerprint_bytes(bytes);
}

inline Model load_model(const std::string& path) {
    return deserialize_model(read_file_bytes(path));
}

}  // namespace spikelab
