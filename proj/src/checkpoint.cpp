#include "kancal/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace kancal {

namespace {

constexpr char kMagic[8] = {'K', 'A', 'N', 'C', 'K', 'P', 'T', '1'};
using json = nlohmann::json;

template <typename T>
void put_le(std::ostream& out, T value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const std::filesystem::path& path) {
    unsigned char bytes[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T)))
        throw DataError("checkpoint: truncated file " + path.string());
    if constexpr (std::endian::native == std::endian::big)
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

/// Every stored tensor, including inactive shortcut weights.
std::vector<std::pair<std::string, Matrix*>> stored_tensors(Model& model) {
    std::vector<std::pair<std::string, Matrix*>> out;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        if (auto* kan = std::get_if<KanLayer>(&model.layers[l])) {
            out.emplace_back(prefix + "coeffs", &kan->coeffs);
            out.emplace_back(prefix + "w_spline", &kan->w_spline);
            out.emplace_back(prefix + "w_base", &kan->w_base);
        } else {
            auto& dense = std::get<DenseLayer>(model.layers[l]);
            out.emplace_back(prefix + "weight", &dense.weight);
            out.emplace_back(prefix + "bias", &dense.bias);
        }
    }
    return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    checkpoint.model.validate();
    Model model = checkpoint.model;

    json header;
    header["format"] = "kancal-checkpoint";
    header["version"] = 1;
    header["kind"] = to_string(model.kind);
    header["tau"] = checkpoint.tau;
    header["layers"] = json::array();
    for (const auto& layer : model.layers) {
        if (const auto* kan = std::get_if<KanLayer>(&layer)) {
            header["layers"].push_back({{"type", "kan"},
                                        {"in", kan->in_dim},
                                        {"out", kan->out_dim},
                                        {"grid_min", kan->spec.grid_min},
                                        {"grid_max", kan->spec.grid_max},
                                        {"grid_size", kan->spec.grid_size},
                                        {"degree", kan->spec.degree},
                                        {"shortcut", to_string(kan->shortcut)}});
        } else {
            const auto& dense = std::get<DenseLayer>(layer);
            header["layers"].push_back({{"type", "dense"},
                                        {"in", dense.in_dim},
                                        {"out", dense.out_dim},
                                        {"activation", to_string(dense.activation)}});
        }
    }
    const auto tensors = stored_tensors(model);
    header["tensors"] = json::array();
    for (const auto& [name, m] : tensors)
        header["tensors"].push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
    header["metadata"] = json::parse(checkpoint.metadata_json);

    const std::string text = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("checkpoint: cannot write " + path.string());
    out.write(kMagic, sizeof kMagic);
    put_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, m] : tensors)
        for (Eigen::Index i = 0; i < m->size(); ++i) put_le<double>(out, m->data()[i]);
    if (!out) throw DataError("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open " + path.string());
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw DataError("checkpoint: " + path.string() + " has a bad magic number");
    const auto header_len = get_le<std::uint64_t>(in, path);
    if (header_len > (std::uint64_t{1} << 30)) throw DataError("checkpoint: header too large");
    std::string text(header_len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(header_len)))
        throw DataError("checkpoint: truncated header in " + path.string());

    json header;
    try {
        header = json::parse(text);
    } catch (const json::exception& e) {
        throw DataError(std::string("checkpoint: bad header: ") + e.what());
    }

    Checkpoint cp;
    try {
        cp.tau = header.at("tau").get<double>();
        cp.model.kind = parse_model_kind(header.at("kind").get<std::string>());
        for (const auto& l : header.at("layers")) {
            const std::string type = l.at("type");
            if (type == "kan") {
                Spec spec;
                spec.grid_min = l.at("grid_min");
                spec.grid_max = l.at("grid_max");
                spec.grid_size = l.at("grid_size");
                spec.degree = l.at("degree");
                cp.model.layers.emplace_back(KanLayer::zeros(
                    l.at("in"), l.at("out"), spec, parse_shortcut(l.at("shortcut"))));
            } else if (type == "dense") {
                cp.model.layers.emplace_back(DenseLayer::zeros(
                    l.at("in"), l.at("out"), parse_activation(l.at("activation"))));
            } else {
                throw DataError("checkpoint: unknown layer type '" + type + "'");
            }
        }
        const auto tensors = stored_tensors(cp.model);
        const auto& table = header.at("tensors");
        if (table.size() != tensors.size())
            throw DataError("checkpoint: tensor table does not match architecture");
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            const auto& entry = table[i];
            Matrix* m = tensors[i].second;
            if (entry.at("name") != tensors[i].first || entry.at("rows") != m->rows() ||
                entry.at("cols") != m->cols())
                throw DataError("checkpoint: tensor '" + tensors[i].first + "' shape mismatch");
            for (Eigen::Index k = 0; k < m->size(); ++k) m->data()[k] = get_le<double>(in, path);
        }
        if (header.contains("metadata")) cp.metadata_json = header["metadata"].dump();
    } catch (const json::exception& e) {
        throw DataError(std::string("checkpoint: malformed header: ") + e.what());
    } catch (const ConfigError& e) {
        throw DataError(std::string("checkpoint: invalid architecture: ") + e.what());
    }
    cp.model.validate();
    return cp;
}

}  // namespace kancal
