#include "imf/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "imf/error.hpp"

namespace imf {

namespace {

constexpr const char* kB64 = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

template <class T>
const char* dtype_tag();
template <>
const char* dtype_tag<float>() {
    return "f32";
}
template <>
const char* dtype_tag<double>() {
    return "f64";
}

template <class T>
std::string encode_values(const std::vector<T>& v) {
    return base64_encode(reinterpret_cast<const unsigned char*>(v.data()), v.size() * sizeof(T));
}

template <class T>
std::vector<T> decode_values(const std::string& text, std::size_t expected, const std::string& who) {
    std::vector<unsigned char> bytes = base64_decode(text);
    if (bytes.size() != expected * sizeof(T))
        throw DataError("checkpoint: '" + who + "' holds " + std::to_string(bytes.size()) +
                        " bytes, expected " + std::to_string(expected * sizeof(T)));
    std::vector<T> out(expected);
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

}  // namespace

std::string base64_encode(const unsigned char* bytes, std::size_t n) {
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    for (std::size_t i = 0; i < n; i += 3) {
        unsigned int v = bytes[i] << 16;
        if (i + 1 < n) v |= bytes[i + 1] << 8;
        if (i + 2 < n) v |= bytes[i + 2];
        out.push_back(kB64[(v >> 18) & 63]);
        out.push_back(kB64[(v >> 12) & 63]);
        out.push_back(i + 1 < n ? kB64[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < n ? kB64[v & 63] : '=');
    }
    return out;
}

std::vector<unsigned char> base64_decode(const std::string& text) {
    static int lut[256];
    static bool init = false;
    if (!init) {
        for (int i = 0; i < 256; ++i) lut[i] = -1;
        for (int i = 0; i < 64; ++i) lut[static_cast<unsigned char>(kB64[i])] = i;
        init = true;
    }
    std::vector<unsigned char> out;
    out.reserve(text.size() / 4 * 3);
    int acc = 0, bits = 0;
    for (char c : text) {
        if (c == '=' || c == '\n' || c == '\r') continue;
        const int v = lut[static_cast<unsigned char>(c)];
        if (v < 0) throw DataError("checkpoint: invalid base64 character");
        acc = (acc << 6) | v;
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<unsigned char>((acc >> bits) & 0xff));
        }
    }
    return out;
}

template <class T>
void save_checkpoint(const std::string& path, const std::vector<TensorEntry<T>>& params,
                     const std::vector<BufferEntry<T>>& buffers, const Adam<T>* optimizer,
                     const nlohmann::json& meta) {
    nlohmann::json j;
    j["format"] = "imf-checkpoint/1";
    j["dtype"] = dtype_tag<T>();
    j["meta"] = meta;
    nlohmann::json jt = nlohmann::json::object();
    for (const auto& p : params) {
        nlohmann::json e;
        e["shape"] = p.tensor.shape();
        e["data"] = encode_values(p.tensor.vec());
        jt[p.name] = std::move(e);
    }
    j["tensors"] = std::move(jt);
    nlohmann::json jb = nlohmann::json::object();
    for (const auto& b : buffers) {
        nlohmann::json e;
        e["size"] = b.data->size();
        e["data"] = encode_values(*b.data);
        jb[b.name] = std::move(e);
    }
    j["buffers"] = std::move(jb);
    if (optimizer) {
        nlohmann::json jo;
        jo["t"] = optimizer->step_count();
        jo["lr"] = optimizer->config().lr;
        nlohmann::json jm = nlohmann::json::object(), jv = nlohmann::json::object();
        const auto& slots = optimizer->slots();
        for (std::size_t i = 0; i < optimizer->params().size(); ++i) {
            jm[optimizer->params()[i].name] = encode_values(slots[i].m);
            jv[optimizer->params()[i].name] = encode_values(slots[i].v);
        }
        jo["m"] = std::move(jm);
        jo["v"] = std::move(jv);
        j["optimizer"] = std::move(jo);
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot open '" + path + "' for writing");
    os << j.dump();
    if (!os) throw DataError("checkpoint: failed writing '" + path + "'");
}

template <class T>
nlohmann::json load_checkpoint(const std::string& path, std::vector<TensorEntry<T>>& params,
                               std::vector<BufferEntry<T>>& buffers, Adam<T>* optimizer) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint: '" + path + "' is not valid JSON: " + e.what());
    }
    if (j.value("format", "") != "imf-checkpoint/1")
        throw DataError("checkpoint: '" + path + "' has unknown format tag");
    if (j.value("dtype", "") != dtype_tag<T>())
        throw DataError("checkpoint: dtype mismatch, file holds " + j.value("dtype", "?") +
                        ", expected " + dtype_tag<T>());
    const auto& jt = j.at("tensors");
    for (auto& p : params) {
        if (!jt.contains(p.name)) throw DataError("checkpoint: missing tensor '" + p.name + "'");
        const auto& e = jt.at(p.name);
        const auto shape = e.at("shape").get<std::vector<std::size_t>>();
        if (shape != p.tensor.shape())
            throw DataError("checkpoint: tensor '" + p.name + "' has shape " + shape_str(shape) +
                            ", model expects " + shape_str(p.tensor.shape()));
        p.tensor.vec() = decode_values<T>(e.at("data").get<std::string>(), p.tensor.numel(), p.name);
    }
    const auto& jb = j.at("buffers");
    for (auto& b : buffers) {
        if (!jb.contains(b.name)) throw DataError("checkpoint: missing buffer '" + b.name + "'");
        const auto& e = jb.at(b.name);
        if (e.at("size").get<std::size_t>() != b.data->size())
            throw DataError("checkpoint: buffer '" + b.name + "' has size " +
                            std::to_string(e.at("size").get<std::size_t>()) + ", model expects " +
                            std::to_string(b.data->size()));
        *b.data = decode_values<T>(e.at("data").get<std::string>(), b.data->size(), b.name);
    }
    if (optimizer && j.contains("optimizer")) {
        const auto& jo = j.at("optimizer");
        optimizer->set_step_count(jo.at("t").get<std::int64_t>());
        optimizer->set_lr(jo.at("lr").get<double>());
        auto& slots = optimizer->slots();
        for (std::size_t i = 0; i < optimizer->params().size(); ++i) {
            const std::string& name = optimizer->params()[i].name;
            slots[i].m = decode_values<T>(jo.at("m").at(name).get<std::string>(),
                                          optimizer->params()[i].tensor.numel(), name + ".m");
            slots[i].v = decode_values<T>(jo.at("v").at(name).get<std::string>(),
                                          optimizer->params()[i].tensor.numel(), name + ".v");
        }
    }
    return j.value("meta", nlohmann::json::object());
}

template void save_checkpoint<float>(const std::string&, const std::vector<TensorEntry<float>>&,
                                     const std::vector<BufferEntry<float>>&, const Adam<float>*,
                                     const nlohmann::json&);
template void save_checkpoint<double>(const std::string&, const std::vector<TensorEntry<double>>&,
                                      const std::vector<BufferEntry<double>>&, const Adam<double>*,
                                      const nlohmann::json&);
template nlohmann::json load_checkpoint<float>(const std::string&,
                                               std::vector<TensorEntry<float>>&,
                                               std::vector<BufferEntry<float>>&, Adam<float>*);
template nlohmann::json load_checkpoint<double>(const std::string&,
                                                std::vector<TensorEntry<double>>&,
                                                std::vector<BufferEntry<double>>&, Adam<double>*);

}  // namespace imf
