#pragma once

// Checkpoint layout:
//
//   uga-checkpoint 1
//   extractor mlp | lstm
//   <spec lines>
//   meta <key> <value>          (zero or more)
//   tensors <count>
//   <name> <rank> <dim>...      (one line per tensor)
//   data
//   <little-endian float64 values of every tensor, in listed order>

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "uga/format.hpp"
#include "uga/models.hpp"

namespace uga {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    ModelBundle bundle;
    std::map<std::string, std::string> meta;
};

namespace detail {

inline void write_f64_le(std::ostream& os, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
    os.write(reinterpret_cast<const char*>(bytes), 8);
}

inline double read_f64_le(std::istream& is) {
    unsigned char bytes[8];
    if (!is.read(reinterpret_cast<char*>(bytes), 8)) throw std::runtime_error("checkpoint: truncated tensor data");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t{bytes[i]} << (8 * i);
    return std::bit_cast<double>(bits);
}

inline std::string expect_line(std::istream& is, const std::string& what) {
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("checkpoint: missing " + what);
    return line;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
    os << "uga-checkpoint " << kCheckpointVersion << '\n';
    if (const auto* mlp = std::get_if<MlpSpec>(&ck.bundle.extractor)) {
        os << "extractor mlp\n";
        os << "layer_widths";
        for (auto w : mlp->layer_widths) os << ' ' << w;
        os << "\nactivations";
        for (auto a : mlp->activations) os << ' ' << to_string(a);
        os << "\ndropout_p " << format_double(mlp->dropout_p) << '\n';
    } else {
        const auto& s = std::get<SeqEncoderSpec>(ck.bundle.extractor);
        os << "extractor lstm\n";
        os << "num_layers " << s.num_layers << "\nhidden_dim " << s.hidden_dim << "\ninput_dim " << s.input_dim
           << "\nwindow_len " << s.window_len << '\n';
    }
    for (const auto& [k, v] : ck.meta) {
        if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
            throw std::invalid_argument("checkpoint: meta key/value must be single-line, key without spaces");
        }
        os << "meta " << k << ' ' << v << '\n';
    }
    os << "tensors " << ck.bundle.params.size() << '\n';
    for (const auto& p : ck.bundle.params) {
        os << p.name << ' ' << p.value.rank();
        for (auto d : p.value.shape()) os << ' ' << d;
        os << (p.extractor ? " extractor" : " head") << '\n';
    }
    os << "data\n";
    for (const auto& p : ck.bundle.params) {
        for (double v : p.value.values()) detail::write_f64_le(os, v);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
    std::string magic;
    int version = 0;
    {
        std::istringstream first(detail::expect_line(is, "header"));
        first >> magic >> version;
    }
    if (magic != "uga-checkpoint") throw std::runtime_error("checkpoint: bad magic '" + magic + "'");
    if (version != kCheckpointVersion) {
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    }

    Checkpoint ck;
    std::string kind;
    {
        std::istringstream ls(detail::expect_line(is, "extractor"));
        std::string key;
        ls >> key >> kind;
        if (key != "extractor") throw std::runtime_error("checkpoint: expected extractor line");
    }
    MlpSpec mlp{{}, {}, 0.0};
    SeqEncoderSpec seq;
    std::size_t tensor_count = 0;
    for (;;) {
        std::istringstream ls(detail::expect_line(is, "tensor table"));
        std::string key;
        ls >> key;
        if (key == "layer_widths") {
            for (std::size_t w; ls >> w;) mlp.layer_widths.push_back(w);
        } else if (key == "activations") {
            for (std::string a; ls >> a;) mlp.activations.push_back(parse_activation(a));
        } else if (key == "dropout_p") {
            ls >> mlp.dropout_p;
        } else if (key == "num_layers") {
            ls >> seq.num_layers;
        } else if (key == "hidden_dim") {
            ls >> seq.hidden_dim;
        } else if (key == "input_dim") {
            ls >> seq.input_dim;
        } else if (key == "window_len") {
            ls >> seq.window_len;
        } else if (key == "meta") {
            std::string k, v;
            ls >> k;
            std::getline(ls >> std::ws, v);
            ck.meta[k] = v;
        } else if (key == "tensors") {
            ls >> tensor_count;
            break;
        } else {
            throw std::runtime_error("checkpoint: unexpected header key '" + key + "'");
        }
        if (ls.fail() && !ls.eof()) throw std::runtime_error("checkpoint: malformed '" + key + "' line");
    }
    if (kind == "mlp") {
        mlp.validate();
        ck.bundle.extractor = mlp;
    } else if (kind == "lstm") {
        seq.validate();
        ck.bundle.extractor = seq;
    } else {
        throw std::runtime_error("checkpoint: unknown extractor '" + kind + "'");
    }

    for (std::size_t i = 0; i < tensor_count; ++i) {
        std::istringstream ls(detail::expect_line(is, "tensor entry"));
        Parameter p;
        std::size_t rank = 0;
        ls >> p.name >> rank;
        Shape shape(rank);
        for (auto& d : shape) ls >> d;
        std::string group;
        ls >> group;
        if (!ls || (group != "extractor" && group != "head")) {
            throw std::runtime_error("checkpoint: malformed tensor entry " + std::to_string(i));
        }
        p.extractor = group == "extractor";
        p.value = Tensor(shape, 0.0);
        ck.bundle.params.push_back(std::move(p));
    }
    if (detail::expect_line(is, "data marker") != "data") throw std::runtime_error("checkpoint: missing data marker");
    for (auto& p : ck.bundle.params) {
        for (auto& v : p.value.values()) v = detail::read_f64_le(is);
    }
    if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error("checkpoint: trailing bytes after data");

    // the stored tensors must match what the spec would create
    const ModelBundle shape_ref = init_bundle(ck.bundle.extractor, 0);
    if (shape_ref.params.size() != ck.bundle.params.size()) {
        throw std::runtime_error("checkpoint: tensor count does not match extractor spec");
    }
    for (std::size_t i = 0; i < shape_ref.params.size(); ++i) {
        if (shape_ref.params[i].name != ck.bundle.params[i].name ||
            shape_ref.params[i].value.shape() != ck.bundle.params[i].value.shape()) {
            throw std::runtime_error("checkpoint: tensor '" + ck.bundle.params[i].name +
                                     "' does not match extractor spec");
        }
    }
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    return read_checkpoint(is);
}

}  // namespace uga
